"""``cgmjepa`` command line: synthetic data, Glucodensity precompute, pretraining,
embedding, probing, representation metrics, divergence, subgroups and ablations.

Every command writes into its own output directory, always including
``run_config.json`` (resolved options, tool version and the fingerprint of any
checkpoint involved). Options can come from a JSON file passed with
``--config``; explicit flags win over file values.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__, data, jepa, metrics, pipeline, probe
from . import glucodensity as gd
from .neural import NonFiniteError
from .views import patchify_ogtt

log = logging.getLogger("cgmjepa")

OBSERVATIONS = "observations.csv"
SPLIT = "split.json"
CHECKPOINT = "model.ckpt"
RUN_CONFIG = "run_config.json"
MASK_SWEEP = (0.25, 0.5, 0.75)
LAMBDA_SWEEP = (0.1, 0.5, 1.0)
PORTION_SWEEP = (0.25, 0.5, 0.75)


class CliError(Exception):
    """Bad usage or a missing upstream artifact (exit status 2)."""


# ---------------------------------------------------------------------------
# output helpers


def _atomic_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}-")
    with os.fdopen(fd, "wb") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return v


def _write_csv(path: Path, rows: list[dict], fields=None) -> None:
    if fields is None:
        fields = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: _fmt(r.get(k, "")) for k in fields})
    _atomic_bytes(path, buf.getvalue().encode("utf-8"))


def _write_json(path: Path, obj) -> None:
    _atomic_bytes(path, (json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n").encode("utf-8"))


def _save_png(fig, path: Path) -> None:
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    _atomic_bytes(path, buf.getvalue())


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def _run_config(out: Path, args, fingerprint: str | None = None, extra=None) -> None:
    opts = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config_text")}
    record = {"command": args.command, "options": opts, "version": __version__,
              "checkpoint_fingerprint": fingerprint}
    if getattr(args, "config_text", None) is not None:
        record["config_file"] = args.config_text
    if extra:
        record.update(extra)
    _write_json(out / RUN_CONFIG, record)


def _require(path: Path, producer: str) -> Path:
    if not path.exists():
        raise CliError(f"{path} not found; produce it first with `cgmjepa {producer}`")
    return path


# ---------------------------------------------------------------------------
# loaders


def _load_cohort(data_dir: str):
    d = Path(data_dir)
    series = data.parse_csv(_require(d / OBSERVATIONS, "synth --out " + str(d)))
    split = data.load_split(_require(d / SPLIT, "synth --out " + str(d)))
    return series, split


def _spline_lambda(args, split) -> float:
    return args.spline_lambda if args.spline_lambda is not None else pipeline.smoothing_lambda(split)


def _read_embeddings(emb_dir: Path):
    """(encoder name, stream -> subject -> vector, fingerprint) from an embed directory."""
    path = _require(emb_dir / "embeddings.csv", f"embed --out {emb_dir}")
    cfg = json.loads(_require(emb_dir / RUN_CONFIG, f"embed --out {emb_dir}").read_text())
    out: dict[str, dict[str, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            vec = np.array([float(row[k]) for k in row if k.startswith("e")])
            out.setdefault(row["stream"], {})[row["subject_id"]] = vec
    return cfg["options"]["name"], out, cfg.get("checkpoint_fingerprint")


def _read_patch_embeddings(emb_dir: Path, stream: str):
    path = _require(emb_dir / "patch_embeddings.csv", f"embed --out {emb_dir}")
    per: dict[str, dict[int, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            if row["stream"] != stream:
                continue
            per.setdefault(row["subject_id"], {})[int(row["patch"])] = np.array(
                [float(row[k]) for k in row if k.startswith("e")])
    return {sid: np.stack([p[j] for j in sorted(p)]) for sid, p in per.items()}


def _read_raw_features(emb_dir: Path):
    path = _require(emb_dir / "raw_features.csv", f"embed --out {emb_dir}")
    out: dict[str, dict[str, np.ndarray]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.setdefault(row["stream"], {})[row["subject_id"]] = np.array(
                [float(row[k]) for k in row if k.startswith("g")])
    return out


def _load_encoder(args):
    """(name, PatchEncoder, fingerprint) from --checkpoint or an untrained init."""
    if args.checkpoint:
        path = _require(Path(args.checkpoint), "pretrain")
        state, _, _ = jepa.load_checkpoint(path)
        return args.name or "jepa", state.context_encoder, jepa.fingerprint(path)
    if not args.untrained:
        raise CliError("embed needs --checkpoint FILE (from `cgmjepa pretrain`) or --untrained")
    state = jepa.ModelState(jepa.ModelConfig(), args.seed)
    return args.name or "untrained", state.context_encoder, None


def _gd_cache(args, windows, required: bool) -> gd.GdCache | None:
    if not args.cache:
        if required:
            raise CliError("cross mode needs --cache FILE; build it with `cgmjepa precompute-gd`")
        return None
    path = Path(args.cache)
    if not path.exists():
        raise CliError(f"{path} not found; build it with `cgmjepa precompute-gd --data {args.data} "
                       f"--cache {path}`")
    cache = gd.GdCache(path)
    missing = [w.key for w in windows if w.key not in cache]
    if missing:
        raise CliError(f"{path} lacks {len(missing)} windows (e.g. {missing[0]}); rerun "
                       "`cgmjepa precompute-gd` with the same --stride")
    return cache


def _train_config(args) -> jepa.TrainConfig:
    return jepa.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, seed=args.seed,
                            mask_ratio=args.mask_ratio, lam=args.lam, stride=args.stride,
                            base_lr=args.lr, ema_momentum=args.ema)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    spec = data.SynthSpec(n_subjects=args.n_subjects, class_balance=args.class_balance,
                          days_per_subject=args.days, noise_sd=args.noise_sd, seed=args.seed)
    series, split = data.generate_synthetic(spec)
    out = Path(args.out)
    fd, tmp = tempfile.mkstemp(dir=_mkdir(out), prefix=".obs-")
    os.close(fd)
    data.write_csv(series, tmp)
    os.replace(tmp, out / OBSERVATIONS)
    _atomic_bytes(out / SPLIT, (json.dumps(split.to_dict(), indent=2, sort_keys=True) + "\n").encode())
    _run_config(out, args, extra={"generator": "Philox-4x64"})
    log.info("wrote %d series for %d subjects to %s", len(series), len(split.subjects), out)
    return 0


def _mkdir(p: Path) -> Path:
    p.mkdir(parents=True, exist_ok=True)
    return p


def cmd_precompute_gd(args) -> int:
    series, _ = _load_cohort(args.data)
    windows = pipeline.corpus_windows(series, args.stride)
    if not windows:
        raise CliError(f"{args.data} has no free-living day windows to precompute")
    path = Path(args.cache or Path(args.data) / f"gd_cache_s{args.stride}.bin")
    cache = gd.precompute_cache(windows, gd.GdCache(path), workers=args.workers)
    log.info("%s holds %d Glucodensity views", path, len(cache))
    return 0


def cmd_pretrain(args) -> int:
    series, _ = _load_cohort(args.data)
    windows = pipeline.corpus_windows(series, args.stride)
    if not windows:
        raise CliError(f"{args.data} has no free-living day windows; synthesize with --days >= 1")
    cache = _gd_cache(args, windows, required=args.mode == "cross")
    model_cfg = jepa.ModelConfig(mode=args.mode)
    train_cfg = _train_config(args)
    result = pipeline.pretrain(windows, model_cfg, train_cfg, cache)
    out = _mkdir(Path(args.out))
    jepa.save_checkpoint(out / CHECKPOINT, result.state, train_cfg,
                         {"n_windows": len(windows), "data": str(args.data)})
    _write_csv(out / "loss_history.csv", result.history, ["epoch", "l_total", "l_cgm", "l_gd", "lr"])
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 4))
    ep = [h["epoch"] for h in result.history]
    ax.plot(ep, [h["l_total"] for h in result.history], label="total")
    ax.plot(ep, [h["l_cgm"] for h in result.history], label="CGM latent")
    if args.mode == "cross":
        ax.plot(ep, [h["l_gd"] for h in result.history], label="Glucodensity")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean L1 loss")
    ax.legend()
    fig.tight_layout()
    _save_png(fig, out / "loss_curve.png")
    plt.close(fig)
    first, last = result.history[0]["l_total"], result.history[-1]["l_total"]
    _run_config(out, args, jepa.fingerprint(out / CHECKPOINT),
                {"loss_first_epoch": first, "loss_last_epoch": last})
    log.info("L_total %.4f -> %.4f; checkpoint %s", first, last, out / CHECKPOINT)
    return 0


def cmd_embed(args) -> int:
    series, split = _load_cohort(args.data)
    name, encoder, fp = _load_encoder(args)
    args.name = name
    traces = probe.ogtt_traces(series, _spline_lambda(args, split))
    keys = [(sid, st) for sid in sorted(traces) for st in sorted(traces[sid])]
    tokens = np.stack([patchify_ogtt(traces[sid][st]).tokens for sid, st in keys])
    per_patch = probe.patch_embeddings(encoder, tokens)
    D = per_patch.shape[-1]
    dims = [f"e{i}" for i in range(D)]
    pooled_rows, patch_rows, raw_rows = [], [], []
    for (sid, st), E in zip(keys, per_patch):
        pooled_rows.append({"subject_id": sid, "stream": st, **dict(zip(dims, E.mean(axis=0)))})
        for j, e in enumerate(E):
            patch_rows.append({"subject_id": sid, "stream": st, "patch": j, **dict(zip(dims, e))})
        raw_rows.append({"subject_id": sid, "stream": st,
                         **{f"g{i}": v for i, v in enumerate(traces[sid][st].values)}})
    out = _mkdir(Path(args.out))
    _write_csv(out / "embeddings.csv", pooled_rows, ["subject_id", "stream", *dims])
    _write_csv(out / "patch_embeddings.csv", patch_rows, ["subject_id", "stream", "patch", *dims])
    _write_csv(out / "raw_features.csv", raw_rows,
               ["subject_id", "stream", *[f"g{i}" for i in range(data.GRID_LEN)]])
    _run_config(out, args, fp)
    return 0


def _cells(args):
    regimes = list(probe.REGIMES) if args.regime == "all" else [args.regime]
    endpoints = list(probe.ENDPOINTS) if args.endpoint == "all" else [args.endpoint]
    return regimes, endpoints


def _prediction_rows(rep: probe.ProbeReport):
    return [{"seed": s, "fold": f, "subject_id": sid, "probability": p, "label": y}
            for s, f, sid, p, y in rep.predictions]


def cmd_probe(args) -> int:
    _, split = _load_cohort(args.data)
    emb_dir = Path(args.embeddings)
    name, emb, fp = _read_embeddings(emb_dir)
    feature_sets = [(name, emb, None)]
    if args.pca:
        feature_sets.append(("pca", _read_raw_features(emb_dir), "pca"))
    out = _mkdir(Path(args.out))
    regimes, endpoints = _cells(args)
    summary = []
    for rn in regimes:
        regime = probe.EvalRegime.named(rn)
        for ep in endpoints:
            for enc, feats, fz in feature_sets:
                rep = probe.run_protocol(feats, split, regime, ep, seeds=args.seeds, encoder=enc,
                                         featurizer=fz, portion=args.portion)
                stem = f"{enc}_{ep}_{rn}"
                if not rep.available:
                    summary.append({"encoder": enc, "regime": rn, "endpoint": ep,
                                    "note": rep.metadata.get("unavailable", "unavailable")})
                    continue
                if len(rep.folds) != 2 * args.seeds:
                    raise probe.ProbeError(f"{stem}: {len(rep.folds)} fold records, expected {2 * args.seeds}")
                _write_csv(out / f"probe_{stem}.csv", probe.report_rows(rep))
                _write_csv(out / f"predictions_{stem}.csv", _prediction_rows(rep))
                agg = rep.aggregate()
                summary.append({"encoder": enc, "regime": rn, "endpoint": ep,
                                **{f"{k}_mean": m for k, (m, _) in agg.items()},
                                **{f"{k}_std": s for k, (_, s) in agg.items()},
                                "retries": sum(r.retries for r in rep.folds), "note": ""})
    _write_csv(out / "summary.csv", summary,
               ["encoder", "regime", "endpoint", "auroc_mean", "auroc_std", "f1_mean", "f1_std",
                "prauc_mean", "prauc_std", "retries", "note"])
    _bar_plot(out / "auroc.png", summary)
    _run_config(out, args, fp)
    return 0


def _bar_plot(path: Path, summary) -> None:
    rows = [r for r in summary if "auroc_mean" in r]
    if not rows:
        return
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(rows) + 2), 4))
    labels = [f"{r['encoder']}\n{r['endpoint']}\n{r['regime'].replace('_', ' ')}" for r in rows]
    ax.bar(range(len(rows)), [r["auroc_mean"] for r in rows], yerr=[r["auroc_std"] for r in rows])
    ax.set_xticks(range(len(rows)), labels, fontsize=6)
    ax.set_ylim(0, 1)
    ax.set_ylabel("AUROC (mean ± std over folds)")
    fig.tight_layout()
    _save_png(fig, path)
    plt.close(fig)


def _read_probe_cells(probe_dir: Path):
    """(encoder, endpoint, regime) -> per-fold AUROC array, ordered by (seed, fold)."""
    cells = {}
    for p in sorted(probe_dir.glob("probe_*.csv")):
        with open(p, newline="") as fh:
            rows = [r for r in csv.DictReader(fh) if r["seed"] != "mean"]
        if rows:
            rows.sort(key=lambda r: (int(r["seed"]), int(r["fold"])))
            key = (rows[0]["encoder"], rows[0]["endpoint"], rows[0]["regime"])
            cells[key] = np.array([float(r["auroc"]) for r in rows])
    return cells


def cmd_metrics(args) -> int:
    _, split = _load_cohort(args.data)
    emb_dir = Path(args.embeddings)
    name, emb, fp = _read_embeddings(emb_dir)
    streams = args.streams or sorted(emb)
    rows = []
    for st in streams:
        if st not in emb:
            raise CliError(f"stream {st!r} not in {emb_dir}/embeddings.csv (have {sorted(emb)})")
        subjects = [s for s in split.subjects if s in emb[st]]
        X = np.stack([emb[st][s] for s in subjects])
        km = metrics.kmeans2(X, seed=args.seed)
        for ep in probe.ENDPOINTS:
            y = split.label_vector(ep, subjects)
            for assignment, lab in (("true_labels", y), ("kmeans", km)):
                if len(np.unique(lab)) < 2:
                    rows.append({"encoder": name, "stream": st, "endpoint": ep,
                                 "assignment": assignment, "note": "single cluster"})
                    continue
                g = metrics.geometry(X, lab)
                rows.append({"encoder": name, "stream": st, "endpoint": ep, "assignment": assignment,
                             "silhouette": g.silhouette, "ch": g.ch, "db": g.db,
                             "bw_ratio": g.bw_ratio, "intra": g.intra, "inter": g.inter,
                             "ari": metrics.ari(km, y), "nmi": metrics.nmi(km, y),
                             "note": ";".join(g.flags)})
    out = _mkdir(Path(args.out))
    _write_csv(out / "geometry.csv", rows,
               ["encoder", "stream", "endpoint", "assignment", "silhouette", "ch", "db",
                "bw_ratio", "intra", "inter", "ari", "nmi", "note"])
    _metric_bars(out / "geometry.png", [r for r in rows if r.get("assignment") == "true_labels"
                                        and "silhouette" in r])
    if args.compare:
        a_dir, b_dir = (Path(p) for p in args.compare)
        a_cells, b_cells = _read_probe_cells(a_dir), _read_probe_cells(b_dir)
        tests = []
        for (enc_a, ep, rn), va in sorted(a_cells.items()):
            match = [(k, v) for k, v in b_cells.items() if k[1:] == (ep, rn) and k[0] != "pca"]
            for (enc_b, _, _), vb in match:
                if len(va) != len(vb):
                    continue
                if len(va) < 5:
                    tests.append({"endpoint": ep, "regime": rn, "a": enc_a, "b": enc_b,
                                  "mean_diff_b_minus_a": float(np.mean(vb - va)),
                                  "flags": f"only {len(va)} paired folds; tests need 5"})
                    continue
                t = metrics.paired_tests(vb, va, seed=args.seed)
                tests.append({"endpoint": ep, "regime": rn, "a": enc_a, "b": enc_b,
                              "mean_diff_b_minus_a": t.mean_diff, "wilcoxon_p": t.wilcoxon_p,
                              "method": t.method, "ci_low": t.ci_low, "ci_high": t.ci_high,
                              "flags": ";".join(t.flags)})
        _write_csv(out / "paired_tests.csv", tests,
                   ["endpoint", "regime", "a", "b", "mean_diff_b_minus_a", "wilcoxon_p", "method",
                    "ci_low", "ci_high", "flags"])
    _run_config(out, args, fp)
    return 0


def _metric_bars(path: Path, rows) -> None:
    if not rows:
        return
    plt = _pyplot()
    keys = ("silhouette", "db", "bw_ratio")
    fig, axes = plt.subplots(1, len(keys), figsize=(4 * len(keys), 4))
    labels = [f"{r['stream']}\n{r['endpoint']}" for r in rows]
    for ax, k in zip(axes, keys):
        vals = [r[k] if math.isfinite(r[k]) else 0.0 for r in rows]
        ax.bar(range(len(rows)), vals)
        ax.set_xticks(range(len(rows)), labels, fontsize=6, rotation=90)
        ax.set_title(k)
    fig.tight_layout()
    _save_png(fig, path)
    plt.close(fig)


def cmd_divergence(args) -> int:
    _, split = _load_cohort(args.data)
    emb_dir = Path(args.embeddings)
    name, _, fp = _read_embeddings(emb_dir)
    per = _read_patch_embeddings(emb_dir, args.stream)
    if not per:
        raise CliError(f"no patch embeddings for stream {args.stream!r} in {emb_dir}")
    subjects = [s for s in split.subjects if s in per]
    E = np.stack([per[s] for s in subjects])
    rows = []
    for ep in probe.ENDPOINTS:
        prof = metrics.patch_divergence(E, split.label_vector(ep, subjects), ep, name)
        rows.append({"encoder": name, "stream": args.stream, "endpoint": ep,
                     **{f"P{j}": d for j, d in enumerate(prof.distances)},
                     "undefined": ";".join(f"P{j}" for j in prof.undefined)})
    out = _mkdir(Path(args.out))
    _write_csv(out / "divergence.csv", rows,
               ["encoder", "stream", "endpoint", *[f"P{j}" for j in range(E.shape[1])], "undefined"])
    _run_config(out, args, fp)
    return 0


def _pooled_predictions(probe_dir: Path, stem: str):
    path = _require(probe_dir / f"predictions_{stem}.csv", f"probe --out {probe_dir}")
    with open(path, newline="") as fh:
        return [(r["subject_id"], float(r["probability"]), int(r["label"])) for r in csv.DictReader(fh)]


def _subgroup_rows(rep: metrics.SubgroupReport, tag: str):
    return [{"method": tag, "field": r.field, "level": r.level, "n": r.n, "auroc": r.auroc,
             "available": r.available, "note": r.note} for r in rep.rows]


def cmd_subgroup(args) -> int:
    _, split = _load_cohort(args.data)
    stem_a = f"{args.encoder}_{args.endpoint}_{args.regime}"
    rep_a = metrics.subgroup_report(_pooled_predictions(Path(args.probe), stem_a),
                                    split.demographics, min_n=args.min_n)
    rows = _subgroup_rows(rep_a, args.encoder)
    gaps = [{"method": args.encoder, "field": k, "gap": v} for k, v in sorted(rep_a.gaps.items())]
    out = _mkdir(Path(args.out))
    if args.probe_b:
        stem_b = f"{args.encoder_b}_{args.endpoint}_{args.regime}"
        rep_b = metrics.subgroup_report(_pooled_predictions(Path(args.probe_b), stem_b),
                                        split.demographics, min_n=args.min_n)
        rows += _subgroup_rows(rep_b, args.encoder_b)
        gaps += [{"method": args.encoder_b, "field": k, "gap": v} for k, v in sorted(rep_b.gaps.items())]
        _write_csv(out / "subgroup_delta.csv", metrics.subgroup_delta(rep_a, rep_b),
                   ["field", "level", "n", "a", "b", "delta"])
    _write_csv(out / "subgroup.csv", rows, ["method", "field", "level", "n", "auroc", "available", "note"])
    _write_csv(out / "subgroup_gaps.csv", gaps, ["method", "field", "gap"])
    if rep_a.note:
        log.warning(rep_a.note)
    _run_config(out, args, extra={"note": rep_a.note})
    return 0


SWEEP_FIELDS = ["encoder", "regime", "endpoint", "n_runs", "auroc_mean", "auroc_std", "f1_mean",
                "f1_std", "prauc_mean", "prauc_std", "note"]


def _pooled_row(label: str, value, encoder: str, rn: str, ep: str, reports) -> dict:
    """Summary over the folds of one or more probe reports of the same cell."""
    row = {label: value, "encoder": encoder, "regime": rn, "endpoint": ep, "n_runs": len(reports)}
    usable = [r for r in reports if r.available]
    if not usable:
        row["note"] = reports[0].metadata.get("unavailable", "unavailable")
        return row
    for key in ("auroc", "f1", "prauc"):
        vals = np.concatenate([r.metric_series(key) for r in usable])
        row[f"{key}_mean"] = float(vals.mean())
        row[f"{key}_std"] = float(vals.std())
    return row


def _sweep_plot(path: Path, rows, label: str) -> None:
    plt = _pyplot()
    cells = sorted({(r["regime"], r["endpoint"]) for r in rows})
    fig, axes = plt.subplots(1, len(cells), figsize=(3.2 * len(cells), 3.2), squeeze=False)
    for ax, (rn, ep) in zip(axes[0], cells):
        for enc in sorted({r["encoder"] for r in rows}):
            pts = [(r[label], r["auroc_mean"], r["auroc_std"]) for r in rows
                   if r["encoder"] == enc and (r["regime"], r["endpoint"]) == (rn, ep) and "auroc_mean" in r]
            if pts:
                x, m, sd = zip(*pts)
                ax.errorbar(x, m, yerr=sd, marker="o", capsize=3, label=enc)
        ax.set_title(f"{ep} / {rn.replace('_', ' ')}", fontsize=8)
        ax.set_xlabel(label.replace("_", " "))
        ax.set_ylim(0, 1)
    axes[0][0].set_ylabel("AUROC")
    axes[0][-1].legend(fontsize=7)
    fig.tight_layout()
    _save_png(fig, path)
    plt.close(fig)


def cmd_ablate(args) -> int:
    """Mask ratio x lambda pretraining grid plus the label-portion sweep.

    Tables: ``ablation_mask_ratio.csv`` (CGM-JEPA and X-CGM-JEPA per ratio, the
    latter at lambda 1), ``ablation_lambda.csv`` (X-CGM-JEPA per lambda, folds
    pooled over the three ratios) and ``ablation_label_portion.csv``.
    """
    series, split = _load_cohort(args.data)
    windows = pipeline.corpus_windows(series, args.stride)
    if not windows:
        raise CliError(f"{args.data} has no free-living day windows")
    sweeps = ("mask", "lambda", "portion") if args.sweep == "all" else (args.sweep,)
    cache = _gd_cache(args, windows, required=True)
    traces = probe.ogtt_traces(series, _spline_lambda(args, split))
    regimes, endpoints = _cells(args)
    out = _mkdir(Path(args.out))
    reports: dict[tuple, dict] = {}

    def cells(mode: str, mask_ratio: float, lam: float, portion: float = 1.0, pca: bool = False):
        key = (mode, mask_ratio, lam, portion, pca)
        if key not in reports:
            cfg = jepa.TrainConfig(epochs=args.epochs, seed=args.seed, mask_ratio=mask_ratio,
                                   lam=lam, stride=args.stride)
            state = _trained(mode, mask_ratio, lam, cfg)
            name = ENCODER_NAMES[mode]
            reports[key] = pipeline.probe_encoders(traces, split, {name: state.context_encoder}, regimes,
                                                   endpoints, args.seeds, include_pca=pca, portion=portion)
        return reports[key]

    models: dict[tuple, jepa.ModelState] = {}

    def _trained(mode, mask_ratio, lam, cfg):
        # lambda has no effect in vanilla mode, so one vanilla model per ratio
        key = (mode, mask_ratio, lam if mode == "cross" else None)
        if key not in models:
            models[key] = pipeline.pretrain(windows, jepa.ModelConfig(mode=mode), cfg, cache).state
        return models[key]

    grid = [(rn, ep) for rn in regimes for ep in endpoints]
    if "mask" in sweeps:
        rows = [_pooled_row("mask_ratio", m, ENCODER_NAMES[mode], rn, ep,
                            [cells(mode, m, 1.0)[(ENCODER_NAMES[mode], rn, ep)]])
                for mode in ("vanilla", "cross") for m in MASK_SWEEP for rn, ep in grid]
        _write_csv(out / "ablation_mask_ratio.csv", rows, ["mask_ratio", *SWEEP_FIELDS])
        _sweep_plot(out / "ablation_mask_ratio.png", rows, "mask_ratio")
    if "lambda" in sweeps:
        name = ENCODER_NAMES["cross"]
        rows = [_pooled_row("lambda", lam, name, rn, ep,
                            [cells("cross", m, lam)[(name, rn, ep)] for m in MASK_SWEEP])
                for lam in LAMBDA_SWEEP for rn, ep in grid]
        _write_csv(out / "ablation_lambda.csv", rows, ["lambda", *SWEEP_FIELDS])
        _sweep_plot(out / "ablation_lambda.png", rows, "lambda")
    if "portion" in sweeps:
        rows = []
        for p in PORTION_SWEEP:
            for mode in ("vanilla", "cross"):
                rep = cells(mode, 0.25, 1.0, p, pca=mode == "cross")
                encs = [ENCODER_NAMES[mode]] + (["pca"] if mode == "cross" else [])
                rows += [_pooled_row("label_portion", p, e, rn, ep, [rep[(e, rn, ep)]])
                         for e in encs for rn, ep in grid]
        _write_csv(out / "ablation_label_portion.csv", rows, ["label_portion", *SWEEP_FIELDS])
        _sweep_plot(out / "ablation_label_portion.png", rows, "label_portion")
    _run_config(out, args, extra={"pretrained_models": len(models)})
    return 0


ENCODER_NAMES = {"vanilla": "cgm-jepa", "cross": "x-cgm-jepa"}


# ---------------------------------------------------------------------------
# parser


def _add_common(p, data=True):
    p.add_argument("--config", help="JSON file of option values (flags override)")
    p.add_argument("-v", "--verbose", action="store_true")
    if data:
        p.add_argument("--data", required=False, help="directory written by `cgmjepa synth`")


def _add_train_opts(p):
    p.add_argument("--mode", choices=("vanilla", "cross"), default="cross")
    p.add_argument("--mask-ratio", type=float, default=0.25)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=43)
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--ema", type=float, default=0.997)


def build_parser() -> argparse.ArgumentParser:
    ref = pipeline.REFERENCE_COHORT
    parser = argparse.ArgumentParser(prog="cgmjepa", description=__doc__.split("\n\n")[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a seeded synthetic cohort")
    _add_common(p, data=False)
    p.add_argument("--n-subjects", type=int, default=ref.n_subjects)
    p.add_argument("--seed", type=int, default=ref.seed)
    p.add_argument("--days", type=int, default=ref.days_per_subject, help="free-living days per subject")
    p.add_argument("--class-balance", type=float, default=ref.class_balance)
    p.add_argument("--noise-sd", type=float, default=ref.noise_sd)
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("precompute-gd", help="build the Glucodensity token cache")
    _add_common(p)
    p.add_argument("--cache", help="cache file (default DATA/gd_cache_s<stride>.bin)")
    p.add_argument("--workers", type=int, default=8)
    p.add_argument("--stride", type=int, choices=(288, 144), default=288)
    p.set_defaults(func=cmd_precompute_gd)

    p = sub.add_parser("pretrain", help="pretrain CGM-JEPA (vanilla) or X-CGM-JEPA (cross)")
    _add_common(p)
    p.add_argument("--cache", help="Glucodensity cache from precompute-gd (needed for cross)")
    p.add_argument("--stride", type=int, choices=(288, 144), default=288)
    _add_train_opts(p)
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="frozen-encoder embeddings of every OGTT-grid trace")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--untrained", action="store_true", help="use a freshly initialised encoder")
    p.add_argument("--seed", type=int, default=43, help="init seed for --untrained")
    p.add_argument("--name", help="encoder label in reports")
    p.add_argument("--spline-lambda", type=float, default=None,
                   help="smoothing penalty (default 0.35 initial / 0.4 validation split)")
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("probe", help="repeated stratified 2-fold linear probing")
    _add_common(p)
    p.add_argument("--embeddings", required=False, help="directory written by `cgmjepa embed`")
    p.add_argument("--regime", choices=(*probe.REGIMES, "all"), default="all")
    p.add_argument("--endpoint", choices=(*probe.ENDPOINTS, "all"), default="all")
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--portion", type=float, default=1.0, help="fraction of training labels kept")
    p.add_argument("--pca", action="store_true", help="also run the PCA baseline on the same folds")
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("metrics", help="embedding geometry, clustering agreement, paired tests")
    _add_common(p)
    p.add_argument("--embeddings", required=False)
    p.add_argument("--streams", nargs="*")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--compare", nargs=2, metavar=("PROBE_A", "PROBE_B"),
                   help="two probe directories; paired tests of B against A per cell")
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("divergence", help="per-patch class-mean cosine distance")
    _add_common(p)
    p.add_argument("--embeddings", required=False)
    p.add_argument("--stream", default="cgm_home_mean")
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_divergence)

    p = sub.add_parser("subgroup", help="demographic subgroup AUROC and gaps")
    _add_common(p)
    p.add_argument("--probe", required=False, help="directory written by `cgmjepa probe`")
    p.add_argument("--encoder", default="jepa")
    p.add_argument("--probe-b")
    p.add_argument("--encoder-b", default="jepa")
    p.add_argument("--regime", choices=tuple(probe.REGIMES), default="home_cgm_in_domain")
    p.add_argument("--endpoint", choices=probe.ENDPOINTS, default="ir")
    p.add_argument("--min-n", type=int, default=5)
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_subgroup)

    p = sub.add_parser("ablate", help="mask-ratio, lambda and label-portion sweeps")
    _add_common(p)
    p.add_argument("--cache")
    p.add_argument("--sweep", choices=("mask", "lambda", "portion", "all"), default="all")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--seed", type=int, default=43)
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--stride", type=int, choices=(288, 144), default=288)
    p.add_argument("--regime", choices=(*probe.REGIMES, "all"), default="all")
    p.add_argument("--endpoint", choices=(*probe.ENDPOINTS, "all"), default="all")
    p.add_argument("--spline-lambda", type=float, default=None)
    p.add_argument("--out", required=False)
    p.set_defaults(func=cmd_ablate)
    return parser


REQUIRED = {
    "synth": ("out",),
    "precompute-gd": ("data",),
    "pretrain": ("data", "out"),
    "embed": ("data", "out"),
    "probe": ("data", "embeddings", "out"),
    "metrics": ("data", "embeddings", "out"),
    "divergence": ("data", "embeddings", "out"),
    "subgroup": ("data", "probe", "out"),
    "ablate": ("data", "out"),
}


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file {path} not found")
        text = path.read_text()
        try:
            cfg = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CliError(f"{path}: invalid JSON ({exc})") from None
        sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
        sp = sub.choices[args.command]
        dests = {a.dest for a in sp._actions}
        values = {k.replace("-", "_"): v for k, v in cfg.items() if not isinstance(v, dict)}
        values = {k: v for k, v in values.items() if k in dests}
        section = {k.replace("-", "_"): v for k, v in cfg.get(args.command, {}).items()}
        unknown = sorted(set(section) - dests)
        if unknown:
            raise CliError(f"{path}: unknown {args.command} options {unknown}")
        values.update(section)
        values.pop("config", None)
        sp.set_defaults(**values)
        args = parser.parse_args(argv)
        args.config_text = text
    missing = [k for k in REQUIRED[args.command] if getattr(args, k, None) in (None, "")]
    if missing:
        raise CliError(f"{args.command}: missing required option(s) "
                       + ", ".join("--" + k.replace("_", "-") for k in missing))
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except CliError as exc:
        print(f"cgmjepa: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"cgmjepa {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (data.DataError, probe.ProbeError, jepa.CheckpointError, gd.StaleCacheError,
            NonFiniteError, metrics.MetricError) as exc:
        print(f"cgmjepa {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
