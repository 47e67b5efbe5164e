"""Frozen-encoder embeddings, PCA baseline, class-balanced l2 logistic probes
and the repeated stratified subject-level 2-fold protocol."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import metrics
from .data import (AlignedTrace, CohortSplit, align_to_grid, build_mean_streams,
                   group_by_subject, make_rng)
from .neural import PatchEncoder
from .spline import smooth_trace
from .views import patchify_ogtt

log = logging.getLogger(__name__)

C_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 100.0)
REGIMES = {
    "venous_in_domain": ("ctru_venous", "ctru_venous"),
    "venous_to_cgm": ("ctru_venous", "cgm_home_mean"),
    "home_cgm_in_domain": ("cgm_home_mean", "cgm_home_mean"),
}
ENDPOINTS = ("ir", "beta")


class ProbeError(ValueError):
    pass


@dataclass(frozen=True)
class EvalRegime:
    name: str
    train_stream: str
    test_stream: str

    @classmethod
    def named(cls, name: str) -> "EvalRegime":
        if name not in REGIMES:
            raise ProbeError(f"unknown regime {name!r}; choose from {sorted(REGIMES)}")
        return cls(name, *REGIMES[name])


# ---------------------------------------------------------------------------
# preprocessing + embeddings


def ogtt_traces(series, lam: float) -> dict[str, dict[str, AlignedTrace]]:
    """Align every OGTT-grid stream, add mean streams, smooth all to 39 finite slots."""
    out = {}
    for sid, streams in group_by_subject(series).items():
        aligned = {name: align_to_grid(s) for name, s in streams.items() if name != "free_living"}
        aligned = build_mean_streams(aligned)
        out[sid] = {name: smooth_trace(tr, lam) for name, tr in aligned.items()
                    if np.count_nonzero(tr.mask) >= 2}
    return out


@torch.no_grad()
def patch_embeddings(encoder: PatchEncoder, tokens) -> np.ndarray:
    """Per-patch outputs of a frozen encoder over all patches: (n, P, D)."""
    x = torch.as_tensor(np.asarray(tokens, dtype=np.float32))
    if x.ndim == 2:
        x = x[None]
    encoder.eval()
    return encoder(x).double().numpy()


def embed_subject(encoder: PatchEncoder, item) -> np.ndarray:
    """Mean-pooled embedding of one OGTT trace (4 patches) or day window tokens."""
    if isinstance(item, AlignedTrace):
        tokens = patchify_ogtt(item).tokens
    else:
        tokens = getattr(item, "tokens", item)
    return patch_embeddings(encoder, tokens)[0].mean(axis=0)


def embed_traces(encoder: PatchEncoder, traces, streams=None) -> dict[str, dict[str, np.ndarray]]:
    """stream -> subject -> embedding for every smoothed trace."""
    keys = [(sid, st) for sid, per in traces.items() for st in per
            if streams is None or st in streams]
    if not keys:
        return {}
    tokens = np.stack([patchify_ogtt(traces[sid][st]).tokens for sid, st in keys])
    pooled = patch_embeddings(encoder, tokens).mean(axis=1)
    out: dict[str, dict[str, np.ndarray]] = {}
    for (sid, st), v in zip(keys, pooled):
        out.setdefault(st, {})[sid] = v
    return out


def raw_trace_features(traces) -> dict[str, dict[str, np.ndarray]]:
    """stream -> subject -> the 39 smoothed glucose values (PCA baseline input)."""
    out: dict[str, dict[str, np.ndarray]] = {}
    for sid, per in traces.items():
        for st, tr in per.items():
            out.setdefault(st, {})[sid] = tr.values.copy()
    return out


# ---------------------------------------------------------------------------
# PCA baseline


@dataclass
class PCA:
    mean: np.ndarray
    components: np.ndarray  # (k, dim)
    explained_variance: np.ndarray
    total_variance: float

    def transform(self, X) -> np.ndarray:
        return (np.asarray(X, dtype=np.float64) - self.mean) @ self.components.T

    def inverse_transform(self, Z) -> np.ndarray:
        return np.asarray(Z) @ self.components + self.mean

    @property
    def explained_ratio(self) -> np.ndarray:
        return self.explained_variance / self.total_variance if self.total_variance > 0 else np.zeros_like(self.explained_variance)


def default_pca_k(n_train: int, dim: int) -> int:
    return max(1, min(10, n_train - 1, dim))


def fit_pca(X, k: int | None = None) -> PCA:
    X = np.asarray(X, dtype=np.float64)
    n, dim = X.shape
    if n < 2:
        raise ProbeError("PCA needs at least 2 training vectors")
    if k is None:
        k = default_pca_k(n, dim)
    if not 1 <= k <= min(n - 1, dim):
        raise ProbeError(f"k={k} exceeds min(n-1, dim)={min(n - 1, dim)}")
    mu = X.mean(axis=0)
    U, S, Vt = np.linalg.svd(X - mu, full_matrices=False)
    # deterministic sign: largest-magnitude loading of each component positive
    signs = np.sign(Vt[np.arange(len(Vt)), np.abs(Vt).argmax(axis=1)])
    signs[signs == 0] = 1.0
    Vt = Vt * signs[:, None]
    var = S ** 2 / (n - 1)
    return PCA(mu, Vt[:k], var[:k], float(var.sum()))


def pca_baseline(train_X, test_X, k: int | None = None):
    """Fit on train only, project both; returns (pca, train_Z, test_Z)."""
    p = fit_pca(train_X, k)
    return p, p.transform(train_X), p.transform(test_X)


# ---------------------------------------------------------------------------
# logistic probe


def balanced_weights(y) -> np.ndarray:
    """Per-sample weights n / (2 * n_c)."""
    y = np.asarray(y, dtype=np.int64)
    n = len(y)
    counts = np.bincount(y, minlength=2)
    if np.any(counts == 0):
        raise ProbeError("both classes must be present in the training set")
    return (n / (2.0 * counts))[y]


def _sigmoid(z):
    return np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))), np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))


def _logloss(beta, X1, y, sw, C):
    z = X1 @ beta
    # log(1 + exp(-s z)) with s = 2y - 1, computed stably
    s = 2.0 * y - 1.0
    ll = np.logaddexp(0.0, -s * z)
    return C * float(sw @ ll) + 0.5 * float(beta[:-1] @ beta[:-1])


@dataclass
class LogisticProbe:
    coef: np.ndarray
    intercept: float
    C: float
    iterations: int = 0
    grad_norm: float = 0.0
    cv_scores: dict = field(default_factory=dict)

    def decision_function(self, X) -> np.ndarray:
        return np.asarray(X, dtype=np.float64) @ self.coef + self.intercept

    def predict_proba(self, X) -> np.ndarray:
        return _sigmoid(self.decision_function(X))


def fit_logistic(X, y, C: float = 1.0, tol: float = 1e-6, max_iter: int = 1000) -> LogisticProbe:
    """Class-balanced l2 logistic regression by damped Newton.

    Minimises ``C * sum_i w_i logloss_i + ||coef||^2 / 2`` (intercept unpenalised)
    until the gradient norm drops below ``tol``.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    sw = balanced_weights(y.astype(np.int64))
    n, d = X.shape
    X1 = np.hstack([X, np.ones((n, 1))])
    beta = np.zeros(d + 1)
    reg = np.ones(d + 1)
    reg[-1] = 0.0
    f = _logloss(beta, X1, y, sw, C)
    gnorm = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        p = _sigmoid(X1 @ beta)
        grad = C * X1.T @ (sw * (p - y)) + reg * beta
        gnorm = float(np.linalg.norm(grad))
        if gnorm < tol:
            break
        W = C * sw * p * (1.0 - p)
        H = (X1.T * W) @ X1 + np.diag(reg + 1e-12)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        t = 1.0
        while True:
            cand = beta - t * step
            fc = _logloss(cand, X1, y, sw, C)
            if fc <= f - 1e-4 * t * float(grad @ step) or t < 1e-10:
                break
            t *= 0.5
        if fc > f:
            break
        beta, f = cand, fc
    return LogisticProbe(beta[:-1].copy(), float(beta[-1]), C, it, gnorm)


def stratified_two_fold(y, seed: int) -> np.ndarray:
    """Fold id (0/1) per sample, stratified by class. With an odd class count the
    extra sample lands in fold ``seed % 2``."""
    y = np.asarray(y, dtype=np.int64)
    rng = make_rng(seed)
    folds = np.empty(len(y), dtype=np.int64)
    for c in (0, 1):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        half = len(idx) // 2
        first = half + (len(idx) % 2 if seed % 2 == 0 else 0)
        folds[idx[:first]] = 0
        folds[idx[first:]] = 1
    return folds


def logreg_cv(X, y, seed: int = 0, Cs=C_GRID) -> LogisticProbe:
    """Pick C by inner stratified 2-fold AUROC, refit on all of (X, y)."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if len(np.unique(y)) < 2:
        raise ProbeError("logreg_cv needs both classes in the training set")
    folds = stratified_two_fold(y, seed)
    scores = {}
    for C in Cs:
        vals = []
        for f in (0, 1):
            tr, te = folds != f, folds == f
            if len(np.unique(y[tr])) < 2 or len(np.unique(y[te])) < 2:
                continue
            m = fit_logistic(X[tr], y[tr], C)
            vals.append(metrics.auroc(m.decision_function(X[te]), y[te]))
        scores[C] = float(np.mean(vals)) if vals else math.nan
    valid = {c: s for c, s in scores.items() if not math.isnan(s)}
    best = max(valid, key=lambda c: (valid[c], -c)) if valid else 1.0
    model = fit_logistic(X, y, best)
    model.cv_scores = scores
    return model


# ---------------------------------------------------------------------------
# protocol


@dataclass
class FoldRecord:
    seed: int
    fold: int
    auroc: float
    f1: float
    prauc: float
    C: float
    n_train: int
    n_test: int
    retries: int
    train_subjects: list[str]
    test_subjects: list[str]


@dataclass
class ProbeReport:
    regime: str
    endpoint: str
    encoder: str
    folds: list[FoldRecord]
    predictions: list[tuple]  # (seed, fold, subject_id, probability, label)
    metadata: dict = field(default_factory=dict)
    available: bool = True

    def aggregate(self) -> dict[str, tuple[float, float]]:
        out = {}
        for key in ("auroc", "f1", "prauc"):
            vals = np.array([getattr(r, key) for r in self.folds])
            out[key] = (float(vals.mean()), float(vals.std())) if len(vals) else (math.nan, math.nan)
        return out

    def metric_series(self, key: str = "auroc") -> np.ndarray:
        return np.array([getattr(r, key) for r in self.folds])


def fold_assignments(subjects, y, seed: int, max_retries: int = 100):
    """Stratified 2-fold assignment for one seed; resample while any fold lacks a class."""
    for retry in range(max_retries + 1):
        folds = stratified_two_fold(y, seed + 1_000_003 * retry)
        ok = all(len(np.unique(y[folds == f])) == 2 for f in (0, 1))
        if ok:
            return folds, retry
    raise ProbeError(f"seed {seed}: could not draw 2 folds that both contain both classes")


def subsample_stratified(idx, y, portion: float, rng) -> np.ndarray | None:
    """Keep round-half-up(portion * n_c) of each class; None if a class keeps < 2."""
    if portion >= 1.0:
        return idx
    keep = []
    for c in (0, 1):
        ic = idx[y[idx] == c]
        k = int(math.floor(portion * len(ic) + 0.5))
        if k < 2:
            return None
        keep.append(np.sort(ic[rng.permutation(len(ic))[:k]]))
    return np.sort(np.concatenate(keep))


def _matrix(emb: dict, subjects, stream):
    try:
        return np.stack([emb[stream][s] for s in subjects])
    except KeyError as exc:
        raise ProbeError(f"missing {stream} features for subject {exc}") from None


def run_protocol(embeddings, split: CohortSplit, regime: EvalRegime, endpoint: str,
                 seeds: int = 20, encoder: str = "", featurizer=None, portion: float = 1.0,
                 pca_k: int | None = None) -> ProbeReport:
    """Repeated stratified subject-level 2-fold linear probing.

    ``embeddings``: stream -> subject -> vector. ``featurizer`` ("pca" or None)
    turns raw vectors into PCA scores fit on each training fold only.
    """
    if endpoint not in ENDPOINTS:
        raise ProbeError(f"unknown endpoint {endpoint!r}")
    subjects = list(split.subjects)
    y = split.label_vector(endpoint, subjects)
    Xtr_all = _matrix(embeddings, subjects, regime.train_stream)
    Xte_all = _matrix(embeddings, subjects, regime.test_stream)
    report = ProbeReport(regime.name, endpoint, encoder, [], [],
                         {"seeds": seeds, "portion": portion, "featurizer": featurizer or "none",
                          "train_stream": regime.train_stream, "test_stream": regime.test_stream})
    for seed in range(seeds):
        folds, retries = fold_assignments(subjects, y, seed)
        for f in (0, 1):
            test_idx = np.flatnonzero(folds == f)
            train_idx = np.flatnonzero(folds != f)
            if set(train_idx) & set(test_idx):
                raise ProbeError("subject leakage between folds")
            if portion < 1.0:
                sub_rng = make_rng(7_919 * (seed + 1) + f + int(round(portion * 1000)) * 104_729)
                train_idx = subsample_stratified(train_idx, y, portion, sub_rng)
                if train_idx is None:
                    report.available = False
                    report.metadata["unavailable"] = f"portion {portion} leaves < 2 subjects per class"
                    report.folds, report.predictions = [], []
                    return report
            Xtr, Xte = Xtr_all[train_idx], Xte_all[test_idx]
            if featurizer == "pca":
                k = pca_k if pca_k is not None else default_pca_k(len(train_idx), Xtr.shape[1])
                _, Xtr, Xte = pca_baseline(Xtr, Xte, k)
                report.metadata["pca_k"] = k
            model = logreg_cv(Xtr, y[train_idx], seed=10_000 + 2 * seed + f)
            prob = model.predict_proba(Xte)
            yt = y[test_idx]
            report.folds.append(FoldRecord(
                seed, f, metrics.auroc(prob, yt), metrics.f1_at(prob, yt), metrics.prauc(prob, yt),
                model.C, len(train_idx), len(test_idx), retries,
                [subjects[i] for i in train_idx], [subjects[i] for i in test_idx]))
            report.predictions.extend((seed, f, subjects[i], float(p), int(t))
                                      for i, p, t in zip(test_idx, prob, yt))
    return report


def label_portion_sweep(embeddings, split, regime, endpoint, portions=(0.25, 0.5, 0.75),
                        **kwargs) -> dict[float, ProbeReport]:
    return {p: run_protocol(embeddings, split, regime, endpoint, portion=p, **kwargs) for p in portions}


def report_rows(report: ProbeReport) -> list[dict]:
    """Per-fold CSV rows plus a final aggregate row."""
    rows = [{"encoder": report.encoder, "regime": report.regime, "endpoint": report.endpoint,
             "seed": r.seed, "fold": r.fold, "auroc": r.auroc, "f1": r.f1, "prauc": r.prauc,
             "C": r.C, "n_train": r.n_train, "n_test": r.n_test, "retries": r.retries}
            for r in report.folds]
    agg = report.aggregate()
    rows.append({"encoder": report.encoder, "regime": report.regime, "endpoint": report.endpoint,
                 "seed": "mean", "fold": "std",
                 **{k: f"{m:.6f}+-{s:.6f}" for k, (m, s) in agg.items()},
                 "C": "", "n_train": "", "n_test": "", "retries": sum(r.retries for r in report.folds)})
    return rows

