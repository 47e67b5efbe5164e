"""Independent reference computations shared by unit and acceptance tests."""

import itertools
import math

import numpy as np
import torch
from torch.func import functional_call, vmap

from cgmjepa import jepa
from cgmjepa.neural import EncoderConfig, PredictorConfig

# ---------------------------------------------------------------------------
# tiny model + central finite differences

TINY_P = 4
TINY_G = 4
TINY_TOKEN_DIM = 12


def tiny_config(mode="cross") -> jepa.ModelConfig:
    return jepa.ModelConfig(
        encoder=EncoderConfig(embed_dim=8, heads=2, layers=1, max_patches=TINY_P),
        predictor=PredictorConfig(embed_dim=4, heads=2, layers=1),
        gluco=jepa.GlucoConfig(token_dim=TINY_TOKEN_DIM, n_tokens=TINY_G, embed_dim=8, heads=2, layers=1),
        mode=mode)


def tiny_problem(seed: int, batch: int = 3, mode="cross"):
    """A float64 tiny model, random inputs and masks for one seed."""
    state = jepa.ModelState(tiny_config(mode), seed=seed).double()
    g = torch.Generator().manual_seed(10_000 + seed)
    # perturb the target away from the context encoder so both branches matter
    with torch.no_grad():
        for p in state.target_encoder.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    x = 40 + 360 * torch.rand(batch, TINY_P, 12, generator=g, dtype=torch.float64)
    gt = torch.rand(batch, TINY_G, TINY_TOKEN_DIM, generator=g, dtype=torch.float64)
    perm = torch.stack([torch.randperm(TINY_P, generator=g) for _ in range(batch)])
    masked, visible = perm[:, :1].sort(1).values, perm[:, 1:].sort(1).values
    gperm = torch.stack([torch.randperm(TINY_G, generator=g) for _ in range(batch)])
    gmasked = gperm[:, :1].sort(1).values
    lam = 0.5 + float(torch.rand((), generator=g))
    return state, (x, masked, visible, gt, gmasked, lam)


def total_loss(state, inputs):
    x, masked, visible, gt, gmasked, lam = inputs
    return jepa.compute_losses(state, x, masked, visible, lam, gt, gmasked).l_total


def fd_gradients(state, inputs, names, eps=1e-6, chunk=256):
    """Central differences of L_total for every element of the named parameters,
    evaluated in batched form: each row of the vmapped batch is one perturbed copy."""
    params = {n: p.detach() for n, p in state.named_parameters()}
    buffers = {n: b for n, b in state.named_buffers()}
    sizes = [params[n].numel() for n in names]
    base = torch.cat([params[n].reshape(-1) for n in names])

    def loss_at(flat):
        p = dict(params)
        off = 0
        for n, s in zip(names, sizes):
            p[n] = flat[off:off + s].reshape(params[n].shape)
            off += s
        return functional_call(state, (p, buffers), args=(), kwargs={"inputs": inputs})

    batched = vmap(loss_at)
    n = base.numel()
    grad = torch.empty(n, dtype=base.dtype)
    for start in range(0, n, chunk):
        idx = torch.arange(start, min(n, start + chunk))
        E = torch.zeros(len(idx), n, dtype=base.dtype)
        E[torch.arange(len(idx)), idx] = eps
        with torch.no_grad():
            grad[idx] = (batched(base + E) - batched(base - E)) / (2 * eps)
    out, off = {}, 0
    for name, s in zip(names, sizes):
        out[name] = grad[off:off + s].reshape(params[name].shape)
        off += s
    return out


class LossModule(torch.nn.Module):
    """Wrap a ModelState so functional_call can swap its parameters."""

    def __init__(self, state):
        super().__init__()
        self.state = state

    def forward(self, inputs):
        return total_loss(self.state, inputs)


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    num = float((a - b).norm())
    den = max(float(a.norm()), float(b.norm()), 1e-12)
    return num / den


# ---------------------------------------------------------------------------
# metric oracles (written straight from the definitions)


def auroc_pairs(scores, labels) -> float:
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    credit = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return credit / (len(pos) * len(neg))


def prauc_thresholds(scores, labels) -> float:
    """Average precision by enumerating each distinct threshold."""
    scores = np.asarray(scores, float)
    labels = np.asarray(labels)
    P = labels.sum()
    ap, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        pred = scores >= t
        tp = int((pred & (labels == 1)).sum())
        recall = tp / P
        precision = tp / int(pred.sum())
        ap += (recall - prev_recall) * precision
        prev_recall = recall
    return ap


def silhouette_def(X, labels) -> float:
    X = np.asarray(X, float)
    n = len(X)
    vals = []
    for i in range(n):
        same = [j for j in range(n) if labels[j] == labels[i] and j != i]
        if not same:
            vals.append(0.0)
            continue
        a = sum(math.dist(X[i], X[j]) for j in same) / len(same)
        b = min(sum(math.dist(X[i], X[j]) for j in range(n) if labels[j] == c) /
                sum(1 for j in range(n) if labels[j] == c)
                for c in set(labels) if c != labels[i])
        vals.append((b - a) / max(a, b) if max(a, b) > 0 else 0.0)
    return sum(vals) / n


def _centroids(X, labels):
    return {c: np.mean([x for x, l in zip(X, labels) if l == c], axis=0) for c in sorted(set(labels))}


def ch_def(X, labels) -> float:
    X = np.asarray(X, float)
    n, cents = len(X), _centroids(X, labels)
    k = len(cents)
    mu = X.mean(0)
    B = sum(sum(1 for l in labels if l == c) * float(np.sum((m - mu) ** 2)) for c, m in cents.items())
    W = sum(float(np.sum((x - cents[l]) ** 2)) for x, l in zip(X, labels))
    return (B / (k - 1)) / (W / (n - k))


def db_def(X, labels) -> float:
    X = np.asarray(X, float)
    cents = _centroids(X, labels)
    S = {c: np.mean([math.dist(x, cents[c]) for x, l in zip(X, labels) if l == c]) for c in cents}
    return float(np.mean([max((S[i] + S[j]) / math.dist(cents[i], cents[j]) for j in cents if j != i)
                          for i in cents]))


def _comb2(x):
    return x * (x - 1) / 2


def ari_def(a, b) -> float:
    ka, kb = sorted(set(a)), sorted(set(b))
    table = [[sum(1 for x, y in zip(a, b) if x == i and y == j) for j in kb] for i in ka]
    n = len(a)
    sum_ij = sum(_comb2(v) for row in table for v in row)
    sum_a = sum(_comb2(sum(row)) for row in table)
    sum_b = sum(_comb2(sum(table[i][j] for i in range(len(ka)))) for j in range(len(kb)))
    expected = sum_a * sum_b / _comb2(n)
    mx = 0.5 * (sum_a + sum_b)
    if mx == expected:
        return 1.0
    return (sum_ij - expected) / (mx - expected)


def nmi_def(a, b) -> float:
    n = len(a)

    def H(lab):
        return -sum((lab.count(c) / n) * math.log(lab.count(c) / n) for c in set(lab))

    a, b = list(a), list(b)
    mi = 0.0
    for i in set(a):
        for j in set(b):
            nij = sum(1 for x, y in zip(a, b) if x == i and y == j)
            if nij:
                mi += nij / n * math.log(nij * n / (a.count(i) * b.count(j)))
    ha, hb = H(a), H(b)
    if ha == 0 and hb == 0:
        return 1.0
    return mi / (0.5 * (ha + hb))


def best_two_partition_inertia(X) -> float:
    """Exhaustive minimum within-cluster sum of squares over all 2-partitions."""
    X = np.asarray(X, float)
    n = len(X)
    best = math.inf
    for bits in itertools.product((0, 1), repeat=n - 1):
        lab = np.array((0,) + bits)
        if lab.min() == lab.max():
            continue
        tot = sum(float(((X[lab == c] - X[lab == c].mean(0)) ** 2).sum()) for c in (0, 1))
        best = min(best, tot)
    return best
