import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chargesharp.analysis import (CRITICAL_STIFFNESS, StiffnessEstimate, ThresholdError, WindowError, agree,
                                  combine, default_window, fit_correlator, interpolate_at, locate_threshold, log_fit,
                                  power_law_fit, stiffness, window_sensitivity)
from chargesharp.observables import CorrelatorSet

X = np.arange(1, 11, dtype=float)


def test_exact_power_law():
    f = power_law_fit(X, 7 * X ** -2.0)
    assert abs(f.slope + 2) < 1e-12
    assert abs(f.intercept - math.log(7)) < 1e-12
    assert f.n_points == 10


def test_noisy_power_law():
    rng = np.random.default_rng(1)
    f = power_law_fit(X, X ** -2.0 * (1 + 0.01 * rng.standard_normal(X.size)))
    assert abs(f.slope + 2) < 0.05
    assert f.slope_err < 0.05


def test_exact_log_fit():
    f = log_fit(X, 3 * np.log(X) + 1)
    assert abs(f.slope - 3) < 1e-12 and abs(f.intercept - 1) < 1e-12


def test_noisy_log_fit():
    rng = np.random.default_rng(2)
    f = log_fit(X, 0.8 * np.log(X) + 2.5 + 0.01 * rng.standard_normal(X.size))
    assert abs(f.slope - 0.8) < 0.05


@given(st.floats(1e-3, 1e3), st.floats(-3, 3))
def test_affine_equivariance(c, a):
    y = X ** a * (1 + 0.1 * np.sin(X))
    f, g = power_law_fit(X, y), power_law_fit(X, c * y)
    assert abs(f.slope - g.slope) < 1e-9
    assert abs(g.intercept - f.intercept - math.log(c)) < 1e-9


def test_window_errors():
    with pytest.raises(WindowError):
        power_law_fit(X, X ** -2.0, window=(2, 3))
    with pytest.raises(WindowError):
        power_law_fit(X, X - 5, window=(2, 8))
    assert default_window(18) == (2, 4)
    fits = window_sensitivity(X, X ** -2.0, [(1, 2), (2, 5), (2, 9)])
    assert [f.window for f in fits] == [(2.0, 5.0), (2.0, 9.0)]


def test_bootstrap_error_scales_with_batches():
    rng = np.random.default_rng(3)
    errs = []
    for nb in (16, 64, 256):
        runs = []
        for rep in range(5):
            B = X ** -2.0 * (1 + 0.2 * rng.standard_normal((nb, X.size)))
            runs.append(power_law_fit(X, B.mean(axis=0), batches=B, n_boot=400, seed=rep).slope_err)
        errs.append(np.mean(runs))
    for small, big in zip(errs[:-1], errs[1:]):
        assert abs(small / big / 2 - 1) < 0.2
    assert abs(errs[0] / errs[-1] / 4 - 1) < 0.2


def test_bootstrap_needs_two_batches():
    with pytest.raises(ValueError):
        power_law_fit(X, X ** -2.0, batches=np.ones((1, X.size)))


def test_fit_correlator_records_sign():
    f, sign = fit_correlator(X, -0.3 * X ** -2.0, window=(2, 6))
    assert sign == -1 and abs(f.slope + 2) < 1e-12
    _, sign = fit_correlator(X, np.where(X > 4, -1, 1) * X ** -2.0, window=(2, 6))
    assert sign == 0


def synthetic_set(L, rho, noise=0.0, n_batches=0, seed=0):
    rng = np.random.default_rng(seed)
    x = np.arange(L // 2 + 1, dtype=float)
    cw = np.where(x > 0, np.maximum(x, 1) ** (-2 * math.pi * rho), 1.0)
    vq = np.where(x > 0, 8 * rho / math.pi * np.log(np.maximum(x, 1)) + 0.7, 0.0)
    cz = -np.where(x > 0, np.maximum(x, 1) ** -2.0, 1.0)
    batches = None
    if n_batches:
        mk = lambda y: y * (1 + noise * rng.standard_normal((n_batches, y.size)))
        batches = {"cz": mk(cz), "cw": mk(cw), "vq": mk(vq)}
        cz, cw, vq = (batches[k].mean(axis=0) for k in ("cz", "cw", "vq"))
    err = np.full(x.size, 1e-3)
    return CorrelatorSet(L, 100, cz, err, cw, err, vq, err, batches)


def test_stiffness_from_exact_power_law():
    a, b = stiffness(synthetic_set(40, 0.5), window=(2, 10))
    assert a.method == "fromVarQ" and b.method == "fromCW"
    assert abs(a.value - 0.5) < 1e-12 and abs(b.value - 0.5) < 1e-12


def test_threshold_stiffness_gives_exponent_two():
    _, b = stiffness(synthetic_set(40, CRITICAL_STIFFNESS), window=(2, 10))
    assert abs(b.fit.slope + 2) < 1e-12


def test_stiffness_with_batches_agrees():
    a, b = stiffness(synthetic_set(40, 0.4, noise=0.01, n_batches=20), window=(2, 10))
    assert a.stderr > 0 and b.stderr > 0
    assert agree(a, b)
    c = combine(a, b)
    assert min(a.value, b.value) <= c.value <= max(a.value, b.value)
    assert c.stderr < min(a.stderr, b.stderr)


def test_combine_without_errors_is_plain_mean():
    c = combine(StiffnessEstimate(0.2, math.nan, "fromVarQ"), StiffnessEstimate(0.4, 0.1, "fromCW"))
    assert c.value == pytest.approx(0.3) and math.isnan(c.stderr)


def test_locate_linear_threshold():
    p = np.linspace(0.05, 0.5, 10)
    th = locate_threshold(p, 0.6 - p, rho_err=np.full(p.size, 0.01), n_boot=300)
    assert abs(th.p - (0.6 - 1 / math.pi)) < 1e-12
    assert 0 < th.stderr < 0.05
    assert th.target == CRITICAL_STIFFNESS


@given(st.floats(0.1, 0.4), st.floats(0.3, 3.0))
def test_locate_recovers_known_crossing(p_star, slope):
    p = np.linspace(0.0, 0.5, 11)
    rho = CRITICAL_STIFFNESS - slope * (p - p_star) - 0.2 * (p - p_star) ** 2
    th = locate_threshold(p, rho)
    # linear interpolation error is bounded by the curvature over one grid step
    assert abs(th.p - p_star) <= 0.2 * 0.05 ** 2 / slope + 1e-12


def test_locate_rejects_non_monotone_and_missing_crossing():
    p = np.linspace(0, 0.3, 7)
    with pytest.raises(ThresholdError):
        locate_threshold(p, np.array([0.5, 0.45, 0.47, 0.3, 0.2, 0.1, 0.05]))
    with pytest.raises(ThresholdError):
        locate_threshold(p, 0.9 - p)


def test_interpolate_at():
    assert interpolate_at([0.3, 0.1, 0.2], [3.0, 1.0, 2.0], 0.25) == pytest.approx(2.5)
