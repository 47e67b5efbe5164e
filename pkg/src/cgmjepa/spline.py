"""Natural cubic smoothing splines (Reinsch form) with analytic derivatives.

The fit minimises ``sum_i (y_i - f(x_i))**2 + lam * integral f''(t)**2 dt`` over
natural cubic splines with knots at the data abscissae. ``lam`` multiplies the
roughness penalty directly and is not rescaled by the knot spacing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solveh_banded

from .data import GRID, AlignedTrace, DataError

INITIAL_COHORT_LAMBDA = 0.35
VALIDATION_COHORT_LAMBDA = 0.4


@dataclass(frozen=True)
class SplineFit:
    """Piecewise cubic on ``knots``; row i of ``coefficients`` holds (a, b, c, d)
    of ``a + b*s + c*s**2 + d*s**3`` with ``s = t - knots[i]``."""

    knots: np.ndarray
    coefficients: np.ndarray
    lam: float

    @property
    def values(self) -> np.ndarray:
        h = np.diff(self.knots)
        a, b, c, d = self.coefficients[-1]
        return np.append(self.coefficients[:, 0], a + b * h[-1] + c * h[-1] ** 2 + d * h[-1] ** 3)

    def __call__(self, t, order: int = 0):
        return evaluate(self, t, order)


def _reinsch_matrices(h):
    """Banded Q^T Q and R (upper form for solveh_banded), each (3, n-2)."""
    m = len(h) - 1  # interior knots
    inv = 1.0 / h
    # Q columns j=1..n-2 have entries 1/h_{j-1}, -(1/h_{j-1} + 1/h_j), 1/h_j
    q0, q1, q2 = inv[:-1], -(inv[:-1] + inv[1:]), inv[1:]
    qtq = np.zeros((3, m))
    qtq[2] = q0 ** 2 + q1 ** 2 + q2 ** 2
    qtq[1, 1:] = q1[:-1] * q0[1:] + q2[:-1] * q1[1:]
    qtq[0, 2:] = q2[:-2] * q0[2:]
    r = np.zeros((3, m))
    r[2] = (h[:-1] + h[1:]) / 3.0
    r[1, 1:] = h[1:-1] / 6.0
    return qtq, r, (q0, q1, q2)


def _apply_q(qparts, gamma, n):
    q0, q1, q2 = qparts
    out = np.zeros(n)
    out[:-2] += q0 * gamma
    out[1:-1] += q1 * gamma
    out[2:] += q2 * gamma
    return out


def _apply_qt(qparts, y):
    q0, q1, q2 = qparts
    return q0 * y[:-2] + q1 * y[1:-1] + q2 * y[2:]


def fit(x, y, lam: float) -> SplineFit:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ValueError("x and y must be 1-d arrays of equal length")
    if len(x) < 2:
        raise ValueError("smoothing spline needs at least 2 points")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
        raise ValueError("x and y must be finite")
    if lam < 0:
        raise ValueError("lam must be nonnegative")
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    h = np.diff(x)
    if np.any(h <= 0):
        raise ValueError("duplicate abscissae")
    n = len(x)

    gamma_full = np.zeros(n)
    if n == 2 or lam == 0.0:
        g = y.copy()
        if n > 2:
            _, r, qp = _reinsch_matrices(h)
            gamma_full[1:-1] = solveh_banded(r, _apply_qt(qp, y))
    else:
        qtq, r, qp = _reinsch_matrices(h)
        rhs = _apply_qt(qp, y)
        if lam > 1.0:
            # solve (R/lam + Q'Q) eta = Q'y with eta = lam*gamma to avoid cancellation
            eta = solveh_banded(r / lam + qtq, rhs)
            gamma = eta / lam
        else:
            gamma = solveh_banded(r + lam * qtq, rhs)
            eta = lam * gamma
        g = y - _apply_q(qp, eta, n)
        gamma_full[1:-1] = gamma

    a = g[:-1]
    c = gamma_full[:-1] / 2.0
    d = (gamma_full[1:] - gamma_full[:-1]) / (6.0 * h)
    b = (g[1:] - g[:-1]) / h - h * (2.0 * gamma_full[:-1] + gamma_full[1:]) / 6.0
    return SplineFit(x, np.column_stack([a, b, c, d]), float(lam))


def evaluate(sf: SplineFit, t, order: int = 0):
    """Value or derivative of the spline; the boundary cubics extrapolate."""
    if order not in (0, 1, 2):
        raise ValueError("order must be 0, 1 or 2")
    scalar = np.ndim(t) == 0
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    k = sf.knots
    i = np.clip(np.searchsorted(k, t, side="right") - 1, 0, len(k) - 2)
    s = t - k[i]
    a, b, c, d = sf.coefficients[i].T
    if order == 0:
        out = a + s * (b + s * (c + s * d))
    elif order == 1:
        out = b + s * (2.0 * c + 3.0 * s * d)
    else:
        out = 2.0 * c + 6.0 * s * d
    return float(out[0]) if scalar else out


def roughness(sf: SplineFit) -> float:
    """Exact integral of f''(t)**2 over the knot span (f'' is piecewise linear)."""
    h = np.diff(sf.knots)
    m0 = 2.0 * sf.coefficients[:, 2]
    m1 = m0 + 6.0 * sf.coefficients[:, 3] * h
    return float(np.sum(h * (m0 ** 2 + m0 * m1 + m1 ** 2) / 3.0))


def objective(sf: SplineFit, x, y, lam: float) -> float:
    resid = np.asarray(y, dtype=np.float64) - evaluate(sf, np.asarray(x, dtype=np.float64))
    return float(resid @ resid + lam * roughness(sf))


def smooth_trace(trace: AlignedTrace, lam: float) -> AlignedTrace:
    """Fit on the observed slots and evaluate at all 39 grid positions."""
    if np.count_nonzero(trace.mask) < 2:
        raise DataError(f"{trace.subject_id}/{trace.stream}: need >= 2 real observations to smooth")
    x = GRID[trace.mask].astype(np.float64)
    sf = fit(x, trace.values[trace.mask], lam)
    return AlignedTrace(trace.subject_id, trace.stream, evaluate(sf, GRID.astype(np.float64)),
                        trace.mask.copy(), trace.dropped)
