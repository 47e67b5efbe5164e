"""Day windows, hourly patch tokens, OGTT patchification and patch masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import GRID_LEN, AlignedTrace, GlucoseSeries

WINDOW_LEN = 288
PATCH_SIZE = 12
PATCHES_PER_DAY = WINDOW_LEN // PATCH_SIZE  # 24
OGTT_PADDED_LEN = 48
OGTT_PATCHES = OGTT_PADDED_LEN // PATCH_SIZE  # 4


@dataclass(frozen=True)
class DayWindow:
    subject_id: str
    split_idx: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (WINDOW_LEN,):
            raise ValueError(f"day window must have {WINDOW_LEN} samples, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("day window values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def key(self) -> tuple[str, int]:
        return (self.subject_id, self.split_idx)


@dataclass(frozen=True)
class PatchTokens:
    tokens: np.ndarray  # (P, 12)

    @property
    def P(self) -> int:
        return self.tokens.shape[0]

    def concatenate(self) -> np.ndarray:
        return self.tokens.reshape(-1)


@dataclass(frozen=True)
class MaskSpec:
    masked: np.ndarray  # sorted patch indices
    ratio: float
    P: int

    @property
    def visible(self) -> np.ndarray:
        keep = np.ones(self.P, dtype=bool)
        keep[self.masked] = False
        return np.flatnonzero(keep)


def window_days(series: GlucoseSeries, stride: int = WINDOW_LEN) -> list[DayWindow]:
    if stride not in (WINDOW_LEN, WINDOW_LEN // 2):
        raise ValueError("stride must be 288 (no overlap) or 144 (50% overlap)")
    if len(series) > 1:
        steps = np.diff(series.timepoints)
        if not np.allclose(steps, 5.0):
            raise ValueError(f"{series.subject_id}/{series.stream}: not at 5-min cadence")
    v = series.glucose
    if len(v) < WINDOW_LEN:
        return []
    starts = range(0, len(v) - WINDOW_LEN + 1, stride)
    return [DayWindow(series.subject_id, i, v[s:s + WINDOW_LEN]) for i, s in enumerate(starts)]


def tokenize(window: DayWindow) -> PatchTokens:
    return PatchTokens(window.values.reshape(PATCHES_PER_DAY, PATCH_SIZE).copy())


def patchify_ogtt(trace: AlignedTrace) -> PatchTokens:
    """Flat-pad the smoothed 39-slot trace to 48 with its t=180 value; 4 patches.

    Patch j covers t = -10+60j .. 45+60j min; patch 3 holds 3 real slots.
    """
    v = np.asarray(trace.values, dtype=np.float64)
    if v.shape != (GRID_LEN,) or not np.all(np.isfinite(v)):
        raise ValueError("patchify_ogtt needs 39 finite values")
    if not trace.smoothed:
        raise ValueError("trace still contains -1 sentinels; smooth it first")
    padded = np.concatenate([v, np.full(OGTT_PADDED_LEN - GRID_LEN, v[-1])])
    return PatchTokens(padded.reshape(OGTT_PATCHES, PATCH_SIZE))


def mask_count(P: int, ratio: float) -> int:
    """Round-half-up with a floor of 1 (and at most P-1)."""
    k = max(1, int(math.floor(ratio * P + 0.5)))
    return min(k, P - 1)


def sample_mask(P: int, ratio: float, rng: np.random.Generator) -> MaskSpec:
    if not 0 < ratio < 1:
        raise ValueError("mask ratio must lie in (0, 1)")
    if P < 2:
        raise ValueError("need at least 2 patches to mask")
    k = mask_count(P, ratio)
    masked = np.sort(rng.choice(P, size=k, replace=False))
    return MaskSpec(masked, ratio, P)


def split_context(tokens: PatchTokens, mask: MaskSpec):
    """Return (visible tokens, their original indices, masked indices)."""
    if mask.P != tokens.P:
        raise ValueError("mask does not match token count")
    keep = mask.visible
    return tokens.tokens[keep], keep, mask.masked
