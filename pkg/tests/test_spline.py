import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.interpolate import make_smoothing_spline

from cgmjepa import spline
from cgmjepa.data import GRID, GRID_LEN, SENTINEL, AlignedTrace, DataError


def _noisy(n=20, seed=0):
    rng = np.random.default_rng(seed)
    x = np.sort(rng.uniform(0, 10, n))
    return x, np.sin(x) + rng.normal(0, 0.2, n)


def test_interpolates_at_zero_penalty():
    x, y = _noisy()
    f = spline.fit(x, y, 0.0)
    assert np.max(np.abs(f(x) - y)) < 1e-8


def test_huge_penalty_gives_least_squares_line():
    x, y = _noisy(seed=3)
    f = spline.fit(x, y, 1e12)
    slope, intercept = np.polyfit(x, y, 1)
    assert np.max(np.abs(f(x, 1) - slope)) < 1e-6
    assert abs(f(0.0) - intercept) < 1e-6
    assert np.max(np.abs(f(x, 2))) < 1e-6


def test_second_derivative_of_quadratic():
    x = np.linspace(0, 4, 41)
    f = spline.fit(x, x ** 2, 1e-6)
    inner = np.linspace(1, 3, 21)
    assert np.max(np.abs(f(inner, 2) - 2.0)) < 1e-3


def test_natural_boundary():
    x, y = _noisy(seed=7)
    for lam in (0.0, 0.35, 5.0):
        f = spline.fit(x, y, lam)
        assert abs(f(x[0], 2)) < 1e-9 and abs(f(x[-1], 2)) < 1e-9


def test_linear_fit_slope():
    x = np.linspace(-10, 180, 9)
    f = spline.fit(x, 3.0 - 0.5 * x, 0.4)
    np.testing.assert_allclose(f(np.linspace(-20, 200, 50), 1), -0.5, atol=1e-10)


def test_knot_value_at_zero_penalty():
    x, y = _noisy(seed=2)
    f = spline.fit(x, y, 0.0)
    assert f(x[4]) == pytest.approx(y[4], abs=1e-12)


def test_c2_continuity():
    x, y = _noisy(seed=11)
    f = spline.fit(x, y, 0.3)
    h = np.diff(f.knots)
    for i in range(1, len(x) - 1):
        a, b, c, d = f.coefficients[i - 1]
        s = h[i - 1]
        left = (a + b * s + c * s ** 2 + d * s ** 3, b + 2 * c * s + 3 * d * s ** 2, 2 * c + 6 * d * s)
        right = f.coefficients[i, 0], f.coefficients[i, 1], 2 * f.coefficients[i, 2]
        for lv, rv in zip(left, right):
            assert abs(lv - rv) <= 1e-9 * max(1.0, abs(rv))


@pytest.mark.parametrize("lam", [0.01, 0.35, 0.4, 3.0, 100.0])
def test_matches_reference_smoother(lam):
    x, y = _noisy(seed=int(lam * 100))
    f = spline.fit(x, y, lam)
    ref = make_smoothing_spline(x, y, lam=lam)
    t = np.linspace(x[0], x[-1], 200)
    np.testing.assert_allclose(f(t), ref(t), atol=1e-8)


def _natural_interpolant(x, g):
    return spline.fit(x, g, 0.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6), st.floats(1e-3, 50.0))
def test_objective_is_minimal(seed, lam):
    """Any other natural cubic spline on the same knots scores at least as high."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(3, 9))
    x = np.sort(rng.choice(np.arange(40), n, replace=False)).astype(float)
    y = rng.normal(0, 5, n)
    f = spline.fit(x, y, lam)
    best = spline.objective(f, x, y, lam)
    for _ in range(5):
        g = f.values + rng.normal(0, 0.5, n)
        other = _natural_interpolant(x, g)
        assert spline.objective(other, x, y, lam) >= best - 1e-9 * max(1.0, best)
    assert spline.objective(_natural_interpolant(x, y), x, y, lam) >= best - 1e-9 * max(1.0, best)


def test_objective_against_dense_basis_oracle():
    """Brute-force minimisation over knot values with a dense penalty matrix."""
    rng = np.random.default_rng(4)
    x = np.sort(rng.uniform(0, 5, 7))
    y = rng.normal(0, 1, 7)
    lam = 0.8
    # penalty is quadratic in knot values: K[i, j] from roughness of unit-vector interpolants
    n = len(x)
    basis = [_natural_interpolant(x, np.eye(n)[i]) for i in range(n)]
    K = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            both = _natural_interpolant(x, np.eye(n)[i] + np.eye(n)[j])
            K[i, j] = 0.5 * (spline.roughness(both) - spline.roughness(basis[i]) - spline.roughness(basis[j]))
    g = np.linalg.solve(np.eye(n) + lam * K, y)
    f = spline.fit(x, y, lam)
    np.testing.assert_allclose(f.values, g, atol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.floats(-5, 5), st.floats(-3, 3), st.floats(0, 100))
def test_linear_functions_fixed(a, b, lam):
    x = np.linspace(0, 10, 12)
    f = spline.fit(x, a + b * x, lam)
    np.testing.assert_allclose(f(x), a + b * x, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20).filter(lambda c: abs(c) > 1e-3), st.integers(0, 1000))
def test_scale_equivariance(c, seed):
    x, y = _noisy(12, seed)
    t = np.linspace(-1, 11, 30)
    a = spline.fit(x, c * y, 0.5)(t)
    b = c * spline.fit(x, y, 0.5)(t)
    np.testing.assert_allclose(a, b, atol=1e-9 * max(1.0, abs(c)))


def test_fit_errors():
    with pytest.raises(ValueError):
        spline.fit([1.0], [2.0], 0.1)
    with pytest.raises(ValueError, match="duplicate"):
        spline.fit([0.0, 1.0, 1.0], [1.0, 2.0, 3.0], 0.1)
    with pytest.raises(ValueError):
        spline.fit([0.0, 1.0], [1.0, np.nan], 0.1)


def test_two_points_is_a_line():
    f = spline.fit([0.0, 2.0], [1.0, 5.0], 0.7)
    assert f(1.0) == pytest.approx(3.0)
    assert f(5.0, 1) == pytest.approx(2.0)


def test_order_validation():
    f = spline.fit([0.0, 1.0, 2.0], [0.0, 1.0, 0.0], 0.0)
    with pytest.raises(ValueError):
        f(0.5, 3)


def _venous_trace(values_at):
    mask = np.isin(GRID, list(values_at))
    vals = np.full(GRID_LEN, SENTINEL)
    for t, v in values_at.items():
        vals[np.flatnonzero(GRID == t)[0]] = v
    return AlignedTrace("S", "ctru_venous", vals, mask)


def test_smooth_venous_fills_sentinels():
    tr = _venous_trace({-10: 90, 0: 92, 15: 130, 30: 165, 60: 170, 90: 150, 120: 130, 150: 110, 180: 95})
    out = spline.smooth_trace(tr, spline.INITIAL_COHORT_LAMBDA)
    assert np.all(np.isfinite(out.values)) and not np.any(out.values == SENTINEL)
    np.testing.assert_array_equal(out.mask, tr.mask)


def test_smooth_dense_cgm_is_denoising_only():
    rng = np.random.default_rng(0)
    clean = 100 + 60 * np.exp(-((GRID - 60) / 40.0) ** 2)
    noisy = clean + rng.normal(0, 3.0, GRID_LEN)
    out = spline.smooth_trace(AlignedTrace("S", "ctru_cgm", noisy, np.ones(GRID_LEN, bool)),
                              spline.VALIDATION_COHORT_LAMBDA)
    assert np.max(np.abs(out.values - noisy)) < 3 * 3.0


def test_smooth_constant():
    tr = _venous_trace({t: 97.0 for t in (-10, 0, 30, 60, 120, 180)})
    np.testing.assert_allclose(spline.smooth_trace(tr, 0.35).values, 97.0, atol=1e-10)


def test_smooth_needs_two_points():
    with pytest.raises(DataError):
        spline.smooth_trace(_venous_trace({0: 100.0}), 0.35)
