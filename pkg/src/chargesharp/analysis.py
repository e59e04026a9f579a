"""Fits, stiffness extraction and threshold location.

Error bars come from one model throughout: resample circuit-realization
batches with replacement, rebuild the averaged curve and refit.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import math

import numpy as np

CRITICAL_STIFFNESS = 1 / math.pi
N_BOOT = 1000


class WindowError(ValueError):
    pass


class ThresholdError(ValueError):
    pass


@dataclass
class FitResult:
    slope: float
    intercept: float
    slope_err: float
    window: tuple[float, float]
    reduced_chi2: float
    n_points: int

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window"] = list(self.window)
        return d


@dataclass
class StiffnessEstimate:
    value: float
    stderr: float
    method: str
    fit: FitResult | None = None


def default_window(L: int) -> tuple[int, int]:
    """x in [2, L/4]: drop the lattice-scale point and the periodic-wrap tail."""
    return 2, L // 4


def _select(x, y, window):
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    lo, hi = (x.min(), x.max()) if window is None else window
    sel = (x >= lo) & (x <= hi)
    if sel.sum() < 3:
        raise WindowError(f"window [{lo}, {hi}] holds {int(sel.sum())} points, need >= 3")
    return sel, (float(lo), float(hi))


def _linear(u, v, err=None):
    A = np.vstack([u, np.ones_like(u)]).T
    (slope, icpt), *_ = np.linalg.lstsq(A, v, rcond=None)
    resid = v - (slope * u + icpt)
    dof = max(len(u) - 2, 1)
    if err is not None and np.all(np.asarray(err) > 0):
        chi2 = float(np.sum((resid / err) ** 2) / dof)
    else:
        chi2 = float(resid @ resid / dof)
    return float(slope), float(icpt), chi2, A


def _fit(x, y, window, yerr, batches, n_boot, seed, log_y):
    sel, win = _select(x, y, window)
    xs, ys = np.asarray(x, float)[sel], np.asarray(y, float)[sel]
    if log_y and np.any(ys <= 0):
        raise WindowError("non-positive values inside the fit window")
    u = np.log(xs)
    v = np.log(ys) if log_y else ys
    err = None
    if yerr is not None:
        e = np.asarray(yerr, float)[sel]
        err = e / ys if log_y else e
    slope, icpt, chi2, _ = _linear(u, v, err)
    slope_err = math.nan
    if batches is not None:
        B = np.asarray(batches, float)[:, sel]
        if B.shape[0] < 2:
            raise ValueError("bootstrap needs at least two batches")
        rng = np.random.default_rng(seed)
        slopes = []
        for _ in range(n_boot):
            m = B[rng.integers(0, B.shape[0], B.shape[0])].mean(axis=0)
            if log_y:
                if np.any(m <= 0):
                    continue
                m = np.log(m)
            slopes.append(np.polyfit(u, m, 1)[0])
        slope_err = float(np.std(slopes, ddof=1)) if len(slopes) > 1 else math.nan
    else:
        # no disorder batches: ordinary least-squares error
        n = len(u)
        if n > 2:
            resid = v - (slope * u + icpt)
            s2 = resid @ resid / (n - 2)
            slope_err = float(math.sqrt(s2 / np.sum((u - u.mean()) ** 2)))
    return FitResult(slope, icpt, slope_err, win, chi2, int(sel.sum()))


def power_law_fit(x, y, window=None, yerr=None, batches=None, n_boot=N_BOOT, seed=0) -> FitResult:
    """Least squares of log y on log x inside ``window``.

    ``batches`` (n_batches, len(x)) are per-batch curves whose mean is ``y``;
    when given, the slope error is their bootstrap spread.
    """
    return _fit(x, y, window, yerr, batches, n_boot, seed, log_y=True)


def log_fit(x, y, window=None, yerr=None, batches=None, n_boot=N_BOOT, seed=0) -> FitResult:
    """Least squares of y on log x; the slope is the coefficient of the logarithm."""
    return _fit(x, y, window, yerr, batches, n_boot, seed, log_y=False)


def fit_correlator(x, cz, window=None, cz_err=None, batches=None, n_boot=N_BOOT, seed=0):
    """Power-law fit of |C_z|; returns the fit (slope = -alpha) and the sign of C_z
    in the window (+1, -1, or 0 when it changes sign)."""
    sel, _ = _select(x, cz, window)
    signs = np.sign(np.asarray(cz, float)[sel])
    sign = int(signs[0]) if np.all(signs == signs[0]) else 0
    b = None if batches is None else np.abs(np.asarray(batches, float))
    fit = power_law_fit(x, np.abs(cz), window, cz_err, b, n_boot, seed)
    return fit, sign


def stiffness(correlators, window=None, n_boot=N_BOOT, seed=0) -> tuple[StiffnessEstimate, StiffnessEstimate]:
    """rho_s from the interval-variance log slope (pi s / 8) and from the
    string-correlator decay (-slope / 2 pi)."""
    L = correlators.L
    window = window or default_window(L)
    n = L // 2 + 1
    x = np.arange(n)
    batches = correlators.batches or {}
    vq_fit = log_fit(x[1:], correlators.vq[1:], window, correlators.vq_err[1:],
                     None if "vq" not in batches else batches["vq"][:, 1:], n_boot, seed)
    cw_fit = power_law_fit(x[1:], correlators.cw[1:], window, correlators.cw_err[1:],
                           None if "cw" not in batches else batches["cw"][:, 1:], n_boot, seed)
    from_vq = StiffnessEstimate(math.pi * vq_fit.slope / 8, math.pi * vq_fit.slope_err / 8, "fromVarQ", vq_fit)
    from_cw = StiffnessEstimate(-cw_fit.slope / (2 * math.pi), cw_fit.slope_err / (2 * math.pi), "fromCW", cw_fit)
    return from_vq, from_cw


def combine(a: StiffnessEstimate, b: StiffnessEstimate) -> StiffnessEstimate:
    """Inverse-variance weighted mean of two estimates."""
    if not (a.stderr > 0 and b.stderr > 0):
        return StiffnessEstimate(0.5 * (a.value + b.value), math.nan, "combined")
    wa, wb = a.stderr ** -2, b.stderr ** -2
    return StiffnessEstimate((wa * a.value + wb * b.value) / (wa + wb), (wa + wb) ** -0.5, "combined")


def agree(a: StiffnessEstimate, b: StiffnessEstimate, n_sigma: float = 2.0) -> bool:
    return abs(a.value - b.value) <= n_sigma * math.hypot(a.stderr, b.stderr)


def _crossing(p, rho, target):
    d = rho - target
    idx = np.flatnonzero((d[:-1] >= 0) & (d[1:] < 0))
    if idx.size == 0:
        return math.nan
    k = idx[0]
    return float(p[k] + d[k] * (p[k + 1] - p[k]) / (d[k] - d[k + 1]))


@dataclass
class ThresholdEstimate:
    p: float
    stderr: float
    target: float


def locate_threshold(p, rho, rho_err=None, target=CRITICAL_STIFFNESS, n_boot=N_BOOT,
                     seed=0) -> ThresholdEstimate:
    """Linear-interpolated p where rho_s(p) falls through ``target``.

    ``rho`` must be non-increasing in ``p``; the error is the spread of the
    crossing under Gaussian resampling of ``rho`` with ``rho_err``.
    """
    p = np.asarray(p, float)
    rho = np.asarray(rho, float)
    order = np.argsort(p)
    p, rho = p[order], rho[order]
    if np.any(np.diff(rho) > 0):
        raise ThresholdError("rho_s(p) is not monotonically decreasing over the scan")
    p_star = _crossing(p, rho, target)
    if math.isnan(p_star):
        raise ThresholdError(f"rho_s(p) does not cross {target:.4f} inside [{p[0]}, {p[-1]}]")
    err = math.nan
    if rho_err is not None:
        e = np.asarray(rho_err, float)[order]
        rng = np.random.default_rng(seed)
        draws = [_crossing(p, rho + e * rng.standard_normal(len(rho)), target) for _ in range(n_boot)]
        draws = [d for d in draws if not math.isnan(d)]
        err = float(np.std(draws, ddof=1)) if len(draws) > 1 else math.nan
    return ThresholdEstimate(p_star, err, target)


def interpolate_at(p, values, p_star) -> float:
    p = np.asarray(p, float)
    order = np.argsort(p)
    return float(np.interp(p_star, p[order], np.asarray(values, float)[order]))


def window_sensitivity(x, y, windows, kind="power", **kw) -> list[FitResult]:
    """The same fit over several windows; windows that cannot be fitted are skipped."""
    fit = power_law_fit if kind == "power" else log_fit
    out = []
    for w in windows:
        try:
            out.append(fit(x, y, w, **kw))
        except WindowError:
            continue
    return out
