"""Glue shared by the command line and the end-to-end checks: the pinned
reference cohort, corpus assembly, pretraining and multi-encoder probing."""

from __future__ import annotations

import logging

import numpy as np

from . import glucodensity as gd
from . import jepa, probe
from .data import CohortSplit, SynthSpec
from .spline import INITIAL_COHORT_LAMBDA, VALIDATION_COHORT_LAMBDA
from .views import DayWindow, window_days

log = logging.getLogger(__name__)

# Seeded cohort used by the end-to-end acceptance run. Eight free-living days
# per subject gives 320 pretraining windows.
REFERENCE_COHORT = SynthSpec(n_subjects=40, class_balance=0.5, days_per_subject=8,
                             noise_sd=4.0, seed=43)
REFERENCE_REGIME = "home_cgm_in_domain"


def smoothing_lambda(split: CohortSplit) -> float:
    return INITIAL_COHORT_LAMBDA if split.name == "initial" else VALIDATION_COHORT_LAMBDA


def corpus_windows(series, stride: int = 288) -> list[DayWindow]:
    """Day windows from every free-living series, in subject order."""
    out = []
    for s in sorted((s for s in series if s.stream == "free_living"), key=lambda s: s.subject_id):
        out.extend(window_days(s, stride))
    return out


def corpus_arrays(windows, cache: gd.GdCache | None = None, need_gd: bool = True):
    """(day tokens (N, 24, 12), Glucodensity tokens (N, 16, 192) or None)."""
    x = jepa.day_tokens(windows)
    if not need_gd:
        return x, None
    if cache is None:
        g = np.stack([gd.window_tokens(w) for w in windows])
    else:
        g = np.stack([cache[w.key] for w in windows])
    return x, g


def pretrain(windows, model_cfg: jepa.ModelConfig, train_cfg: jepa.TrainConfig,
             cache: gd.GdCache | None = None, init_seed: int | None = None) -> jepa.TrainResult:
    x, g = corpus_arrays(windows, cache, need_gd=model_cfg.mode == "cross")
    state = jepa.ModelState(model_cfg, train_cfg.seed if init_seed is None else init_seed)
    log.info("pretraining %s on %d windows for %d epochs", model_cfg.mode, len(x), train_cfg.epochs)
    return jepa.train(state, x, g, train_cfg)


def probe_encoders(traces, split: CohortSplit, encoders: dict, regimes=tuple(probe.REGIMES),
                   endpoints=probe.ENDPOINTS, seeds: int = 20, include_pca: bool = True,
                   portion: float = 1.0) -> dict[tuple[str, str, str], probe.ProbeReport]:
    """Probe each named encoder (and the PCA baseline) on identical folds.

    Returns reports keyed by (encoder, regime, endpoint).
    """
    features = {name: probe.embed_traces(enc, traces) for name, enc in encoders.items()}
    raw = probe.raw_trace_features(traces) if include_pca else None
    out = {}
    for rn in regimes:
        regime = probe.EvalRegime.named(rn)
        for ep in endpoints:
            for name, emb in features.items():
                out[(name, rn, ep)] = probe.run_protocol(emb, split, regime, ep, seeds=seeds,
                                                         encoder=name, portion=portion)
            if raw is not None:
                out[("pca", rn, ep)] = probe.run_protocol(raw, split, regime, ep, seeds=seeds,
                                                          encoder="pca", featurizer="pca",
                                                          portion=portion)
    return out
