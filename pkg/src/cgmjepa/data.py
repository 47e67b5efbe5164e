"""Glucose observation ingest, OGTT grid alignment, mean streams, cohort splits
and seeded synthetic cohorts.

Synthetic cohorts use numpy's Philox4x64 counter-based bit generator so that a
given seed reproduces the same cohort independent of host and numpy version.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

STREAMS = (
    "ctru_venous",
    "ctru_cgm",
    "home_cgm_1",
    "home_cgm_2",
    "cgm_home_mean",
    "cgm_all_mean",
    "free_living",
)
MEAN_STREAM_COMPONENTS = {
    "cgm_home_mean": ("home_cgm_1", "home_cgm_2"),
    "cgm_all_mean": ("ctru_cgm", "home_cgm_1", "home_cgm_2"),
}

GRID_START, GRID_STOP, GRID_STEP = -10, 180, 5
GRID = np.arange(GRID_START, GRID_STOP + GRID_STEP, GRID_STEP, dtype=np.int64)
GRID_LEN = len(GRID)  # 39
SENTINEL = -1.0

VENOUS_TIMEPOINTS = (-10, 0, 15, 30, 60, 90, 120, 150, 180)
CSV_HEADER = ("subject_id", "stream", "timepoint_min", "glucose_mg_dl")
LABEL_KEYS = ("ir", "beta")
DEMOGRAPHIC_KEYS = ("sex", "age_band", "bmi_band", "ethnicity")


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class GlucoseSeries:
    subject_id: str
    stream: str
    timepoints: np.ndarray  # minutes, strictly increasing
    glucose: np.ndarray  # mg/dL

    def __post_init__(self):
        if self.stream not in STREAMS:
            raise DataError(f"unknown stream {self.stream!r}")
        t = np.asarray(self.timepoints, dtype=np.float64)
        g = np.asarray(self.glucose, dtype=np.float64)
        if t.shape != g.shape or t.ndim != 1:
            raise DataError("timepoints and glucose must be 1-d and equal length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise DataError(f"{self.subject_id}/{self.stream}: timepoints not strictly increasing")
        if not np.all(np.isfinite(g)) or np.any(g <= 0):
            raise DataError(f"{self.subject_id}/{self.stream}: glucose must be finite and > 0")
        object.__setattr__(self, "timepoints", t)
        object.__setattr__(self, "glucose", g)

    def __len__(self):
        return len(self.glucose)


@dataclass(frozen=True)
class AlignedTrace:
    """39-slot trace on the -10..180 min grid; ``mask`` marks real observations."""

    subject_id: str
    stream: str
    values: np.ndarray
    mask: np.ndarray
    dropped: int = 0

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        m = np.asarray(self.mask, dtype=bool)
        if v.shape != (GRID_LEN,) or m.shape != (GRID_LEN,):
            raise DataError(f"aligned trace must have {GRID_LEN} slots")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "mask", m)

    @property
    def smoothed(self) -> bool:
        return not np.any(self.values[~self.mask] == SENTINEL)


@dataclass
class CohortSplit:
    name: str
    subjects: list[str]
    labels: dict[str, dict[str, int]]
    demographics: dict[str, dict[str, str]] = field(default_factory=dict)

    def __post_init__(self):
        if self.name not in ("initial", "validation"):
            raise DataError(f"unknown split name {self.name!r}")
        if not self.subjects:
            raise DataError("split has no subjects")
        if len(set(self.subjects)) != len(self.subjects):
            raise DataError("duplicate subject ids in split")
        for sid in self.subjects:
            lab = self.labels.get(sid)
            if lab is None:
                raise DataError(f"subject {sid} has no labels")
            unknown = set(lab) - set(LABEL_KEYS)
            if unknown:
                raise DataError(f"subject {sid}: unknown label key(s) {sorted(unknown)}")
            for key in LABEL_KEYS:
                if key not in lab:
                    raise DataError(f"subject {sid}: missing label {key!r}")
                if lab[key] not in (0, 1):
                    raise DataError(f"subject {sid}: label {key!r} must be 0 or 1")

    def label_vector(self, endpoint: str, subjects=None) -> np.ndarray:
        subjects = self.subjects if subjects is None else subjects
        return np.array([self.labels[s][endpoint] for s in subjects], dtype=np.int64)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "subjects": list(self.subjects),
            "labels": {s: dict(self.labels[s]) for s in self.subjects},
            "demographics": {s: dict(d) for s, d in self.demographics.items()},
        }


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 40
    class_balance: float = 0.5
    days_per_subject: int = 2
    noise_sd: float = 4.0
    seed: int = 43

    def __post_init__(self):
        if self.n_subjects < 2:
            raise DataError("n_subjects must be >= 2")
        if not 0 < self.class_balance < 1:
            raise DataError("class_balance must lie strictly between 0 and 1")
        if self.days_per_subject < 0 or self.noise_sd < 0:
            raise DataError("days_per_subject and noise_sd must be nonnegative")


def parse_csv(path) -> list[GlucoseSeries]:
    """Read ``subject_id,stream,timepoint_min,glucose_mg_dl`` rows into series.

    Rows are grouped per (subject, stream) and sorted by time. Parse errors name
    the 1-based file line.
    """
    groups: dict[tuple[str, str], dict[float, float]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"line 1: expected header {','.join(CSV_HEADER)}")
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 4:
                raise DataError(f"line {line}: expected 4 fields, got {len(row)}")
            sid, stream, t_raw, g_raw = (c.strip() for c in row)
            if stream not in STREAMS:
                raise DataError(f"line {line}: unknown stream {stream!r}")
            try:
                t = float(t_raw)
                g = float(g_raw)
            except ValueError:
                raise DataError(f"line {line}: non-numeric timepoint or glucose") from None
            if not (math.isfinite(t) and math.isfinite(g)) or g <= 0:
                raise DataError(f"line {line}: glucose must be finite and > 0")
            samples = groups.setdefault((sid, stream), {})
            if t in samples:
                raise DataError(f"line {line}: duplicate timepoint {t:g} for {sid}/{stream}")
            samples[t] = g
    out = []
    for (sid, stream), samples in groups.items():
        ts = sorted(samples)
        out.append(GlucoseSeries(sid, stream, np.array(ts), np.array([samples[t] for t in ts])))
    return out


def write_csv(series, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in series:
            for t, g in zip(s.timepoints, s.glucose):
                w.writerow((s.subject_id, s.stream, repr(float(t)), repr(float(g))))


def align_to_grid(series: GlucoseSeries) -> AlignedTrace:
    """Place exact-timepoint matches on the 39-slot grid; other slots get -1.

    Observations off the grid are dropped (never rounded onto a slot).
    """
    if len(series) == 0:
        raise DataError("cannot align an empty series")
    values = np.full(GRID_LEN, SENTINEL)
    mask = np.zeros(GRID_LEN, dtype=bool)
    slot = (series.timepoints - GRID_START) / GRID_STEP
    on_grid = (slot == np.round(slot)) & (slot >= 0) & (slot < GRID_LEN)
    idx = slot[on_grid].astype(np.int64)
    values[idx] = series.glucose[on_grid]
    mask[idx] = True
    dropped = int(np.count_nonzero(~on_grid))
    if dropped:
        log.info("%s/%s: %d observation(s) off the alignment grid dropped",
                 series.subject_id, series.stream, dropped)
    return AlignedTrace(series.subject_id, series.stream, values, mask, dropped)


def trace_as_series(trace: AlignedTrace) -> GlucoseSeries:
    return GlucoseSeries(trace.subject_id, trace.stream,
                         GRID[trace.mask].astype(np.float64), trace.values[trace.mask])


def mean_stream(components, target: str) -> AlignedTrace:
    """Pointwise mean over the components that are observed at each slot."""
    components = list(components)
    if not components:
        raise DataError("mean_stream needs at least one component")
    subjects = {c.subject_id for c in components}
    if len(subjects) != 1:
        raise DataError(f"mean_stream components span several subjects: {sorted(subjects)}")
    vals = np.stack([c.values for c in components])
    masks = np.stack([c.mask for c in components])
    counts = masks.sum(axis=0)
    total = np.where(masks, vals, 0.0).sum(axis=0)
    mask = counts > 0
    values = np.full(GRID_LEN, SENTINEL)
    values[mask] = total[mask] / counts[mask]
    return AlignedTrace(components[0].subject_id, target, values, mask)


def build_mean_streams(traces: dict[str, AlignedTrace]) -> dict[str, AlignedTrace]:
    """Add cgm_home_mean / cgm_all_mean to a stream->trace map of one subject."""
    out = dict(traces)
    for target, parts in MEAN_STREAM_COMPONENTS.items():
        present = [traces[p] for p in parts if p in traces]
        if present:
            out[target] = mean_stream(present, target)
    return out


def load_split(path) -> CohortSplit:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    return split_from_dict(raw, default_name=Path(path).stem)


def split_from_dict(raw: dict, default_name: str = "initial") -> CohortSplit:
    if not isinstance(raw, dict) or "subjects" not in raw or "labels" not in raw:
        raise DataError("split file needs 'subjects' and 'labels' keys")
    unknown = set(raw) - {"name", "subjects", "labels", "demographics"}
    if unknown:
        raise DataError(f"unknown split keys {sorted(unknown)}")
    name = raw.get("name") or ("validation" if "validation" in default_name else "initial")
    labels = {str(k): {kk: int(vv) for kk, vv in v.items()} for k, v in raw["labels"].items()}
    demo = {str(k): {kk: str(vv) for kk, vv in v.items()}
            for k, v in (raw.get("demographics") or {}).items()}
    return CohortSplit(name, [str(s) for s in raw["subjects"]], labels, demo)


def save_split(split: CohortSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(split.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def check_disjoint(*splits: CohortSplit) -> None:
    seen: dict[str, str] = {}
    for sp in splits:
        for s in sp.subjects:
            if s in seen:
                raise DataError(f"subject {s} appears in both {seen[s]} and {sp.name} splits")
            seen[s] = sp.name


# ---------------------------------------------------------------------------
# synthetic cohorts

# Response kinetics per latent class: (peak time min, peak rise mg/dL, clearance shape).
# Larger shape = sharper return to baseline after the peak.
CLASS_KINETICS = {
    0: dict(peak_time=(45.0, 6.0), peak_rise=(70.0, 8.0), shape=(3.0, 0.3)),
    1: dict(peak_time=(75.0, 8.0), peak_rise=(95.0, 10.0), shape=(1.5, 0.2)),
}
FASTING_RANGE = (80.0, 100.0)
CGM_LAG_MIN = 10.0
# P(label = 1 | class); IR tracks the latent class closely, beta less so.
LABEL_PROBS = {"ir": (0.05, 0.95), "beta": (0.08, 0.92)}
DEMOGRAPHIC_LEVELS = {
    "sex": ("F", "M"),
    "age_band": ("<40", "40-60", ">60"),
    "bmi_band": ("normal", "overweight", "obese"),
    "ethnicity": ("Asian", "Black", "Hispanic", "White"),
}
MEAL_TIMES_H = (7.5, 12.5, 18.5)


def make_rng(seed: int) -> np.random.Generator:
    """Philox4x64-10 generator keyed by a 64-bit seed."""
    return np.random.Generator(np.random.Philox(key=int(seed) & 0xFFFFFFFFFFFFFFFF))


def load_response(t, peak_time, peak_rise, shape):
    """Post-load rise over baseline; zero before the load at t=0."""
    t = np.asarray(t, dtype=np.float64)
    u = np.clip(t, 0.0, None) / peak_time
    with np.errstate(divide="ignore"):
        r = peak_rise * np.where(u > 0, u ** shape * np.exp(shape * (1.0 - u)), 0.0)
    return r


def _subject_kinetics(rng, cls):
    spec = CLASS_KINETICS[cls]
    pt = max(20.0, rng.normal(*spec["peak_time"]))
    pr = max(20.0, rng.normal(*spec["peak_rise"]))
    sh = max(0.8, rng.normal(*spec["shape"]))
    return pt, pr, sh


def generate_synthetic(spec: SynthSpec) -> tuple[list[GlucoseSeries], CohortSplit]:
    """Two-class synthetic cohort with OGTT venous/CGM streams and free-living days.

    Every subject gets ctru_venous (9 draws), ctru_cgm, home_cgm_1/2 on the OGTT
    grid and ``days_per_subject`` days of 5-min free-living CGM. All randomness is
    drawn in a fixed order from one Philox stream.
    """
    rng = make_rng(spec.seed)
    n = spec.n_subjects
    n1 = int(math.floor(spec.class_balance * n + 0.5))
    n1 = min(max(n1, 1), n - 1)
    classes = np.array([0] * (n - n1) + [1] * n1)
    classes = classes[rng.permutation(n)]
    width = max(3, len(str(n - 1)))
    subjects = [f"S{i:0{width}d}" for i in range(n)]
    noise = spec.noise_sd
    grid = GRID.astype(np.float64)
    series: list[GlucoseSeries] = []
    labels: dict[str, dict[str, int]] = {}
    demographics: dict[str, dict[str, str]] = {}

    for sid, cls in zip(subjects, classes):
        cls = int(cls)
        fasting = rng.uniform(*FASTING_RANGE)
        pt, pr, sh = _subject_kinetics(rng, cls)

        venous_t = np.array(VENOUS_TIMEPOINTS, dtype=np.float64)
        venous = fasting + load_response(venous_t, pt, pr, sh) + rng.normal(0, noise, venous_t.size)
        series.append(GlucoseSeries(sid, "ctru_venous", venous_t, venous))

        for stream in ("ctru_cgm", "home_cgm_1", "home_cgm_2"):
            scale = 1.0 if stream == "ctru_cgm" else rng.uniform(0.85, 1.15)
            offset = rng.normal(0.0, 3.0)
            vals = (fasting + offset
                    + load_response(grid - CGM_LAG_MIN, pt, pr * scale, sh)
                    + rng.normal(0, noise, grid.size))
            series.append(GlucoseSeries(sid, stream, grid.copy(), vals))

        if spec.days_per_subject:
            n_samples = 288 * spec.days_per_subject
            t_min = np.arange(n_samples, dtype=np.float64) * 5.0
            hours = t_min / 60.0
            amp = rng.uniform(4.0, 10.0)
            vals = fasting + amp * np.sin(2 * np.pi * (hours - 4.0) / 24.0)
            for day in range(spec.days_per_subject):
                for meal_h in MEAL_TIMES_H:
                    onset = (day * 24 + meal_h + rng.normal(0.0, 0.5)) * 60.0
                    size = rng.uniform(0.5, 1.0)
                    vals = vals + load_response(t_min - onset, pt, pr * size, sh)
            vals = vals + rng.normal(0, noise, n_samples)
            vals = np.clip(vals, 40.0, None)
            series.append(GlucoseSeries(sid, "free_living", t_min, vals))

        labels[sid] = {}
        for key in LABEL_KEYS:
            labels[sid][key] = int(rng.random() < LABEL_PROBS[key][cls])
        demographics[sid] = {k: str(lv[int(rng.integers(len(lv)))])
                             for k, lv in DEMOGRAPHIC_LEVELS.items()}

    split = CohortSplit("validation", subjects, labels, demographics)
    return series, split


def latent_classes(spec: SynthSpec) -> np.ndarray:
    """Class assignment used by generate_synthetic (same permutation draw)."""
    rng = make_rng(spec.seed)
    n = spec.n_subjects
    n1 = min(max(int(math.floor(spec.class_balance * n + 0.5)), 1), n - 1)
    classes = np.array([0] * (n - n1) + [1] * n1)
    return classes[rng.permutation(n)]


def group_by_subject(series) -> dict[str, dict[str, GlucoseSeries]]:
    out: dict[str, dict[str, GlucoseSeries]] = {}
    for s in series:
        out.setdefault(s.subject_id, {})[s.stream] = s
    return out
