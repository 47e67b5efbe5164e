"""Classification, embedding-geometry, partition-agreement, per-patch
divergence, subgroup and paired-significance metrics.

Conventions pinned here:

* AUROC is the Mann-Whitney statistic with ties counted as 1/2.
* PRAUC is average precision: sum over distinct descending score thresholds of
  (recall_k - recall_{k-1}) * precision_k.
* F1 thresholds probabilities at 0.5 (``p >= 0.5`` is positive).
* Geometry: ``intra`` = mean distance of each point to its own cluster centroid;
  ``inter`` = mean pairwise distance between cluster centroids;
  ``bw_ratio`` = inter / intra. A singleton cluster contributes silhouette 0.
* NMI uses the arithmetic mean of the two entropies.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .data import make_rng


class MetricError(ValueError):
    pass


def _binary(labels):
    y = np.asarray(labels).astype(np.int64).ravel()
    if not np.all((y == 0) | (y == 1)):
        raise MetricError("labels must be 0/1")
    if y.min() == y.max():
        raise MetricError("both classes must be present")
    return y


def _midranks(x):
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    n1 = int(y.sum())
    n0 = len(y) - n1
    r = _midranks(s)
    return float((r[y == 1].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def prauc(scores, labels) -> float:
    y = _binary(labels)
    s = np.asarray(scores, dtype=np.float64).ravel()
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    tp = np.cumsum(y)
    fp = np.cumsum(1 - y)
    # last index of every block of tied scores
    last = np.r_[np.flatnonzero(np.diff(s) != 0), len(s) - 1]
    tp, fp = tp[last], fp[last]
    precision = tp / (tp + fp)
    recall = tp / y.sum()
    dr = np.diff(np.r_[0.0, recall])
    # accumulate in threshold order (not pairwise) so the sum is reproducible term by term
    ap = 0.0
    for term in (dr * precision).tolist():
        ap += term
    return ap


def f1(preds, labels) -> float:
    p = np.asarray(preds).astype(np.int64).ravel()
    y = np.asarray(labels).astype(np.int64).ravel()
    tp = int(np.sum((p == 1) & (y == 1)))
    fp = int(np.sum((p == 1) & (y == 0)))
    fn = int(np.sum((p == 0) & (y == 1)))
    if tp == 0:
        return 0.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def f1_at(probs, labels, threshold: float = 0.5) -> float:
    return f1((np.asarray(probs) >= threshold).astype(np.int64), labels)


# ---------------------------------------------------------------------------
# embedding geometry


@dataclass
class Geometry:
    silhouette: float
    ch: float
    db: float
    bw_ratio: float
    intra: float
    inter: float
    flags: list[str] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("silhouette", "ch", "db", "bw_ratio", "intra", "inter")}


def _clusters(X, labels):
    X = np.asarray(X, dtype=np.float64)
    lab = np.asarray(labels).ravel()
    ks = np.unique(lab)
    if len(ks) < 2:
        raise MetricError("geometry needs at least two clusters")
    idx = np.searchsorted(ks, lab)
    cents = np.stack([X[idx == k].mean(axis=0) for k in range(len(ks))])
    return X, idx, cents


def _pairdist(A, B):
    return np.sqrt(((A[:, None, :] - B[None, :, :]) ** 2).sum(-1))


def silhouette(X, labels) -> float:
    X, idx, _ = _clusters(X, labels)
    D = np.sqrt(((X[:, None, :] - X[None, :, :]) ** 2).sum(-1))
    K = idx.max() + 1
    sizes = np.bincount(idx, minlength=K)
    s = np.zeros(len(X))
    for i in range(len(X)):
        if sizes[idx[i]] == 1:
            continue
        sums = np.bincount(idx, weights=D[i], minlength=K)
        a = sums[idx[i]] / (sizes[idx[i]] - 1)
        other = [sums[k] / sizes[k] for k in range(K) if k != idx[i]]
        b = min(other)
        denom = max(a, b)
        s[i] = 0.0 if denom == 0 else (b - a) / denom
    return float(s.mean())


def calinski_harabasz(X, labels) -> float:
    X, idx, cents = _clusters(X, labels)
    n, K = len(X), len(cents)
    mu = X.mean(axis=0)
    sizes = np.bincount(idx, minlength=K)
    between = float(np.sum(sizes * ((cents - mu) ** 2).sum(1)))
    within = float(((X - cents[idx]) ** 2).sum())
    if n == K:
        raise MetricError("Calinski-Harabasz undefined when every point is its own cluster")
    if within == 0.0:
        return math.inf if between > 0 else 1.0
    return between * (n - K) / (within * (K - 1))


def davies_bouldin(X, labels) -> float:
    X, idx, cents = _clusters(X, labels)
    K = len(cents)
    scatter = np.array([np.linalg.norm(X[idx == k] - cents[k], axis=1).mean() for k in range(K)])
    M = _pairdist(cents, cents)
    worst = np.zeros(K)
    for i in range(K):
        r = [(scatter[i] + scatter[j]) / M[i, j] if M[i, j] > 0 else (0.0 if scatter[i] + scatter[j] == 0 else math.inf)
             for j in range(K) if j != i]
        worst[i] = max(r)
    return float(worst.mean())


def geometry(X, labels) -> Geometry:
    Xa, idx, cents = _clusters(X, labels)
    flags = []
    intra = float(np.linalg.norm(Xa - cents[idx], axis=1).mean())
    K = len(cents)
    inter = float(np.mean([np.linalg.norm(cents[i] - cents[j]) for i, j in itertools.combinations(range(K), 2)]))
    if intra == 0.0:
        bw = math.inf
        flags.append("bw_ratio_zero_within")
    else:
        bw = inter / intra
    try:
        ch = calinski_harabasz(Xa, labels)
    except MetricError:
        ch = math.nan
        flags.append("ch_undefined")
    if inter == 0.0:
        flags.append("coincident_centroids")
    return Geometry(silhouette(Xa, labels), ch, davies_bouldin(Xa, labels), bw, intra, inter, flags)


# ---------------------------------------------------------------------------
# k-means


def _inertia(X, assign, K=2):
    tot = 0.0
    for k in range(K):
        pts = X[assign == k]
        if len(pts):
            tot += float(((pts - pts.mean(0)) ** 2).sum())
    return tot


def _kmeanspp(X, K, rng):
    n = len(X)
    cents = [X[int(rng.integers(n))]]
    for _ in range(1, K):
        d2 = np.min(((X[:, None, :] - np.array(cents)[None]) ** 2).sum(-1), axis=1)
        tot = d2.sum()
        if tot == 0:
            cents.append(X[int(rng.integers(n))])
        else:
            cents.append(X[int(np.searchsorted(np.cumsum(d2), rng.random() * tot, side="right").clip(0, n - 1))])
    return np.array(cents)


def lloyd(X, cents, max_iter: int = 300):
    """Lloyd iterations to an assignment fixpoint; returns (assign, inertia trace)."""
    K = len(cents)
    assign = None
    trace = []
    for _ in range(max_iter):
        d2 = ((X[:, None, :] - cents[None]) ** 2).sum(-1)
        new = d2.argmin(axis=1)
        trace.append(_inertia(X, new, K))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        cents = np.stack([X[assign == k].mean(0) if np.any(assign == k) else cents[k] for k in range(K)])
    return assign, trace


def kmeans2(X, seed: int = 0, restarts: int = 10) -> np.ndarray:
    """Best-inertia 2-means partition over k-means++ restarts; labels canonicalised
    so that the cluster of the first point is 0."""
    X = np.asarray(X, dtype=np.float64)
    if len(X) < 2:
        raise MetricError("kmeans2 needs at least 2 points")
    rng = make_rng(seed)
    best, best_in = None, math.inf
    for _ in range(restarts):
        assign, trace = lloyd(X, _kmeanspp(X, 2, rng))
        if trace[-1] < best_in - 1e-12:
            best, best_in = assign, trace[-1]
    if best[0] == 1:
        best = 1 - best
    return best


# ---------------------------------------------------------------------------
# partition agreement


def _contingency(a, b):
    _, ai = np.unique(np.asarray(a), return_inverse=True)
    _, bi = np.unique(np.asarray(b), return_inverse=True)
    if len(ai) != len(bi):
        raise MetricError("partitions differ in length")
    C = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(C, (ai, bi), 1)
    return C


def ari(a, b) -> float:
    C = _contingency(a, b)
    n = C.sum()
    comb = lambda x: x * (x - 1) / 2.0  # noqa: E731
    sum_ij = comb(C).sum()
    sa = comb(C.sum(1)).sum()
    sb = comb(C.sum(0)).sum()
    expected = sa * sb / comb(n)
    max_idx = 0.5 * (sa + sb)
    if max_idx == expected:
        return 1.0
    return float((sum_ij - expected) / (max_idx - expected))


def _entropy(counts):
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(a, b) -> float:
    C = _contingency(a, b)
    n = C.sum()
    ha, hb = _entropy(C.sum(1)), _entropy(C.sum(0))
    if ha == 0.0 and hb == 0.0:
        return 1.0
    pij = C / n
    outer = np.outer(C.sum(1), C.sum(0)) / n ** 2
    nz = pij > 0
    mi = float((pij[nz] * np.log(pij[nz] / outer[nz])).sum())
    return float(np.clip(mi / (0.5 * (ha + hb)), 0.0, 1.0))


# ---------------------------------------------------------------------------
# per-patch label divergence


@dataclass
class DivergenceProfile:
    distances: np.ndarray  # per patch, nan where undefined
    undefined: list[int]
    endpoint: str = ""
    encoder: str = ""


def cosine_distance(u, v) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        return math.nan
    return float(np.clip(1.0 - np.dot(u, v) / (nu * nv), 0.0, 2.0))


def patch_divergence(patch_embeddings, labels, endpoint: str = "", encoder: str = "") -> DivergenceProfile:
    """``patch_embeddings``: (n_subjects, P, D). Cosine distance between the class-1
    and class-0 mean embedding at each patch."""
    E = np.asarray(patch_embeddings, dtype=np.float64)
    y = _binary(labels)
    m1 = E[y == 1].mean(axis=0)
    m0 = E[y == 0].mean(axis=0)
    d = np.array([cosine_distance(m1[j], m0[j]) for j in range(E.shape[1])])
    return DivergenceProfile(d, [int(j) for j in np.flatnonzero(np.isnan(d))], endpoint, encoder)


# ---------------------------------------------------------------------------
# subgroups


@dataclass
class SubgroupRow:
    field: str
    level: str
    n: int
    auroc: float
    available: bool
    note: str = ""


@dataclass
class SubgroupReport:
    rows: list[SubgroupRow]
    gaps: dict[str, float]
    note: str = ""


def subgroup_report(predictions, demographics, min_n: int = 5, fields=None) -> SubgroupReport:
    """Pooled AUROC per (field, level) for subgroups with at least ``min_n`` subjects.

    ``predictions``: iterable of (subject_id, score, label) records pooled over folds.
    """
    preds = [(str(s), float(p), int(y)) for s, p, y in predictions]
    if fields is None:
        fields = sorted({k for d in demographics.values() for k in d})
    rows, gaps = [], {}
    for fld in fields:
        levels = sorted({demographics[s][fld] for s, _, _ in preds
                         if s in demographics and fld in demographics[s]})
        vals = []
        for lv in levels:
            sel = [(p, y) for s, p, y in preds if demographics.get(s, {}).get(fld) == lv]
            n = len({s for s, _, _ in preds if demographics.get(s, {}).get(fld) == lv})
            if n < min_n:
                continue
            ys = np.array([y for _, y in sel])
            if ys.min() == ys.max():
                rows.append(SubgroupRow(fld, lv, n, math.nan, False, "single class"))
                continue
            a = auroc([p for p, _ in sel], ys)
            rows.append(SubgroupRow(fld, lv, n, a, True))
            vals.append(a)
        if len(vals) >= 2:
            gaps[fld] = max(vals) - min(vals)
    note = "" if rows else f"no subgroup reaches n >= {min_n}"
    return SubgroupReport(rows, gaps, note)


def subgroup_delta(report_a: SubgroupReport, report_b: SubgroupReport) -> list[dict]:
    """Per-subgroup comparison rows with delta = B - A."""
    bmap = {(r.field, r.level): r for r in report_b.rows}
    out = []
    for r in report_a.rows:
        other = bmap.get((r.field, r.level))
        if other is None:
            continue
        out.append({"field": r.field, "level": r.level, "n": r.n, "a": r.auroc,
                    "b": other.auroc, "delta": other.auroc - r.auroc})
    return out


# ---------------------------------------------------------------------------
# paired tests


@dataclass
class PairedTest:
    wilcoxon_p: float
    ci_low: float
    ci_high: float
    mean_diff: float
    method: str
    flags: list[str] = field(default_factory=list)


def _exact_signed_rank_pvalue(ranks2, w2):
    """Two-sided exact p of the signed-rank statistic by enumerating all sign
    patterns through a count table over doubled (integer) rank sums."""
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.float64)
    counts[0] = 1.0
    for r in ranks2.astype(np.int64):
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r] if r else counts
        counts = counts + shifted
    probs = counts / counts.sum()
    lower = probs[: w2 + 1].sum()
    upper = probs[w2:].sum()
    return float(min(1.0, 2.0 * min(lower, upper)))


def wilcoxon(a, b) -> tuple[float, str, list[str]]:
    d = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    flags = []
    if np.all(d == 0):
        return 1.0, "degenerate", ["all_differences_zero"]
    if np.any(d == 0):
        flags.append("zero_differences_dropped")
    d = d[d != 0]
    n = len(d)
    ranks = _midranks(np.abs(d))
    w_plus = ranks[d > 0].sum()
    if n <= 25:
        return _exact_signed_rank_pvalue(np.round(2 * ranks), int(round(2 * w_plus))), "exact", flags
    mean = n * (n + 1) / 4.0
    _, tie_counts = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - np.sum(tie_counts ** 3 - tie_counts) / 48.0
    z = (abs(w_plus - mean) - 0.5) / math.sqrt(var)
    p = math.erfc(max(z, 0.0) / math.sqrt(2.0))
    return float(min(1.0, p)), "normal", flags


def paired_tests(a, b, seed: int = 0, n_boot: int = 10_000, alpha: float = 0.05) -> PairedTest:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise MetricError("paired series must be 1-d and equal length")
    if len(a) < 5:
        raise MetricError("paired tests need n >= 5")
    p, method, flags = wilcoxon(a, b)
    d = a - b
    rng = make_rng(seed)
    idx = rng.integers(0, len(d), size=(n_boot, len(d)))
    means = d[idx].mean(axis=1)
    lo, hi = np.percentile(means, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return PairedTest(p, float(lo), float(hi), float(d.mean()), method, flags)
