"""Structure-factor hydrodynamics of sharpening:

    dC/dt = B k^2 - kappa p C^2 - D k^2 C

integrated independently for every wavevector.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class HydroInstability(RuntimeError):
    pass


@dataclass(frozen=True)
class HydroParams:
    B: float = 1.0
    D: float = 1.0
    kappa: float = 1.0
    p: float = 0.0
    k: tuple = ()

    def __post_init__(self):
        for name in ("B", "D", "kappa"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.p < 0:
            raise ValueError("p must be non-negative")
        k = np.asarray(self.k, dtype=float)
        if k.size and (np.any(k <= 0) or np.any(np.diff(k) < 0)):
            raise ValueError("k grid must be positive and sorted ascending")
        object.__setattr__(self, "k", tuple(k.tolist()))

    @property
    def k_array(self) -> np.ndarray:
        return np.asarray(self.k, dtype=float)


def rhs(params: HydroParams, C: np.ndarray) -> np.ndarray:
    k2 = params.k_array ** 2
    return params.B * k2 - params.kappa * params.p * C ** 2 - params.D * k2 * C


def steady_state(params: HydroParams) -> np.ndarray:
    """Positive root of B k^2 - kappa p C^2 - D k^2 C = 0 (B/D when p = 0)."""
    k2 = params.k_array ** 2
    a = params.kappa * params.p
    if a == 0:
        return np.full_like(k2, params.B / params.D)
    disc = np.sqrt(params.D ** 2 * k2 ** 2 + 4 * a * params.B * k2)
    # rationalised form avoids cancellation when D k^2 dominates
    return 2 * params.B * k2 / (params.D * k2 + disc)


def max_stable_dt(params: HydroParams, C_max: float) -> float:
    k2max = params.k_array.max() ** 2
    return 1.0 / (params.D * k2max + 2 * params.kappa * params.p * C_max)


def evolve(params: HydroParams, C0, t: float, dt: float) -> np.ndarray:
    """Classic fourth-order Runge-Kutta from ``C0`` up to time ``t``."""
    C = np.array(np.broadcast_to(np.asarray(C0, dtype=float), params.k_array.shape))
    if np.any(C < 0):
        raise ValueError("initial structure factor must be non-negative")
    c_max = max(float(C.max()), float(steady_state(params).max()))
    if dt >= max_stable_dt(params, c_max):
        raise HydroInstability(f"dt={dt} exceeds the stability bound {max_stable_dt(params, c_max):.3g}")
    n = int(np.ceil(t / dt))
    h = t / n if n else 0.0
    blowup = 10 * c_max + 1
    for _ in range(n):
        k1 = rhs(params, C)
        k2 = rhs(params, C + 0.5 * h * k1)
        k3 = rhs(params, C + 0.5 * h * k2)
        k4 = rhs(params, C + h * k3)
        C = C + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(C)) or C.max() > blowup:
            raise HydroInstability("integration blew up")
    return C


def relaxation_time(params: HydroParams) -> float:
    """Slowest linear relaxation time around the steady state."""
    Cs = steady_state(params)
    rate = 2 * params.kappa * params.p * Cs + params.D * params.k_array ** 2
    return float(1.0 / rate.min())


def converge(params: HydroParams, C0=0.0, tol: float = 1e-8, safety: float = 0.5):
    """Integrate long enough to sit within ``tol`` (relative) of the fixed point.

    Returns ``(C_evolved, t, dt)``.
    """
    Cs = steady_state(params)
    C0a = np.broadcast_to(np.asarray(C0, float), Cs.shape)
    gap = np.max(np.abs(C0a - Cs) / Cs) + 1.0
    t = relaxation_time(params) * (np.log(gap / tol) + 5.0)
    dt = safety * max_stable_dt(params, max(float(C0a.max()), float(Cs.max())))
    return evolve(params, C0a, t, dt), t, dt


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(x), np.log(y), 1)[0])
