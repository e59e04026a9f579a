"""Charge-diagonal observables of a single distribution and their
trajectory averages.

All multi-site moments come from one Walsh-Hadamard transform of the weight
vector: with ``F = WHT(w)``, ``<prod_{i in S} sigma^z_i> = (-1)**|S| F[S]``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
import math

import numba as nb
import numpy as np

from .filter import ChargeDistribution, popcounts


@nb.njit(cache=True)
def _fwht(a):
    n = a.shape[0]
    h = 1
    while h < n:
        for i in range(0, n, 2 * h):
            for j in range(i, i + h):
                x = a[j]
                y = a[j + h]
                a[j] = x + y
                a[j + h] = x - y
        h *= 2


def parity_moments(weights: np.ndarray) -> np.ndarray:
    """``M[S] = <prod_{i in S} sigma^z_i>`` for every subset mask ``S``."""
    L = int(weights.size).bit_length() - 1
    f = np.array(weights, dtype=float, copy=True)
    _fwht(f)
    sign = 1 - 2 * (popcounts(L) & 1)
    return sign * f


@lru_cache(maxsize=None)
def _masks(L):
    half = L // 2
    b = np.arange(L)[:, None]
    x = np.arange(half + 1)[None, :]
    pair = (1 << b) | (1 << ((b + x) % L))
    pair[:, 0] = 0                       # sigma_b^2 = 1
    string = np.zeros((L, half + 1), dtype=np.int64)
    for xx in range(2, half + 1):
        string[:, xx] = string[:, xx - 1] | (1 << ((np.arange(L) + xx - 1) % L))
    return pair, string


def _one_point(M, L):
    return M[1 << np.arange(L)]


def covariance_matrix(M: np.ndarray, L: int) -> np.ndarray:
    z = _one_point(M, L)
    i, j = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    masks = np.where(i == j, 0, (1 << i) | (1 << j))
    return M[masks] - np.outer(z, z)


def two_point(dist: ChargeDistribution, x: int) -> tuple[float, float, float]:
    """Translation averages of (<sigma_x sigma_0>, <sigma_x>, <sigma_0>)."""
    L = dist.L
    if not 0 <= x < L:
        raise ValueError("need 0 <= x < L")
    M = parity_moments(dist.weights)
    b = np.arange(L)
    masks = np.where(x == 0, 0, (1 << b) | (1 << ((b + x) % L)))
    z = _one_point(M, L).mean()
    return float(M[masks].mean()), float(z), float(z)


def connected_two_point(dist: ChargeDistribution, x: int) -> float:
    """Translation average of <sigma_{b+x} sigma_b> - <sigma_{b+x}><sigma_b>."""
    L = dist.L
    C = covariance_matrix(parity_moments(dist.weights), L)
    b = np.arange(L)
    return float(C[(b + x) % L, b].mean())


def string_op(dist: ChargeDistribution, x: int, base: int = 0) -> float:
    """<W_[base, base+x]>, the product of sigma^z over the x-1 interior sites."""
    L = dist.L
    if not 1 <= x <= L // 2:
        raise ValueError("need 1 <= x <= L/2")
    mask = 0
    for k in range(1, x):
        mask |= 1 << ((base + k) % L)
    return float(parity_moments(dist.weights)[mask])


def interval_variance(dist: ChargeDistribution, ell: int) -> float:
    """Translation-averaged variance of the charge on ``ell`` consecutive sites."""
    L = dist.L
    if not 1 <= ell <= L // 2:
        raise ValueError("need 1 <= ell <= L/2")
    return float(_interval_variances(covariance_matrix(parity_moments(dist.weights), L))[ell])


def interval_variance_direct(dist: ChargeDistribution, ell: int, start: int = 0) -> float:
    """Same quantity for one interval from the first and second moments of the
    interval charge, without going through the covariance matrix."""
    L = dist.L
    mask = 0
    for k in range(ell):
        mask |= 1 << ((start + k) % L)
    n_plus = popcounts(L)[np.arange(1 << L) & mask]
    q = 2.0 * n_plus - ell
    mean = dist.weights @ q
    return float(dist.weights @ q ** 2 - mean ** 2)


def _interval_variances(C):
    L = C.shape[0]
    half = L // 2
    out = np.zeros(half + 1)
    for b in range(L):
        order = (b + np.arange(half)) % L
        S = np.cumsum(np.cumsum(C[np.ix_(order, order)], axis=0), axis=1)
        out[1:] += np.diag(S)
    return out / L


OBSERVABLES = ("cz", "zz", "z", "cw", "vq", "qvar")


def snapshot_observables(dist: ChargeDistribution) -> dict[str, np.ndarray]:
    """Per-snapshot estimators, translation-averaged.

    ``cz[x]``, ``zz[x]``: connected and full two-point functions, x = 0..L/2.
    ``cw[x]``: <W_[0,x]>^2 for x = 1..L/2 (entry 0 is the empty string, 1).
    ``vq[l]``: interval-charge variance for l = 0..L/2.
    ``z``: <sigma^z>; ``qvar``: variance of the total charge.
    """
    L = dist.L
    M = parity_moments(dist.weights)
    pair, string = _masks(L)
    z = _one_point(M, L)
    half = L // 2
    zz = M[pair]
    partner = z[(np.arange(L)[:, None] + np.arange(half + 1)[None, :]) % L]
    cz = zz - z[:, None] * partner
    cw = M[string] ** 2
    C = covariance_matrix(M, L)
    return {
        "cz": cz.mean(axis=0),
        "zz": zz.mean(axis=0),
        "z": np.array([z.mean()]),
        "cw": cw.mean(axis=0),
        "vq": _interval_variances(C),
        "qvar": np.array([C.sum()]),
    }


def average_snapshots(snaps: list[dict[str, np.ndarray]]) -> dict[str, np.ndarray]:
    return {k: np.mean([s[k] for s in snaps], axis=0) for k in snaps[0]}


# --------------------------------------------------------------------------
# accumulators

def _msum_add(partials: list[float], x: float) -> None:
    # Shewchuk's exact running sum (the algorithm behind math.fsum)
    i = 0
    for y in partials:
        if abs(x) < abs(y):
            x, y = y, x
        hi = x + y
        lo = y - (hi - x)
        if lo:
            partials[i] = lo
            i += 1
        x = hi
    partials[i:] = [x]


@dataclass
class ObservableAccumulator:
    """Streaming count, sum and sum of squares per bin.

    Sums are kept as exact float expansions, so merging in any order gives
    bit-identical totals.
    """

    label: str
    n_bins: int
    count: int = 0
    _sum: list = field(default_factory=list, repr=False)
    _sumsq: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self._sum:
            self._sum = [[] for _ in range(self.n_bins)]
            self._sumsq = [[] for _ in range(self.n_bins)]

    def add(self, values) -> None:
        values = np.asarray(values, dtype=float).reshape(-1)
        if values.size != self.n_bins:
            raise ValueError(f"{self.label}: expected {self.n_bins} values, got {values.size}")
        for k, v in enumerate(values.tolist()):
            _msum_add(self._sum[k], v)
            _msum_add(self._sumsq[k], v * v)
        self.count += 1

    def merge(self, other: "ObservableAccumulator") -> "ObservableAccumulator":
        if (self.label, self.n_bins) != (other.label, other.n_bins):
            raise ValueError("cannot merge accumulators of different observables")
        out = ObservableAccumulator(self.label, self.n_bins, self.count + other.count)
        for dst, a, b in ((out._sum, self._sum, other._sum), (out._sumsq, self._sumsq, other._sumsq)):
            for k in range(self.n_bins):
                parts = list(a[k])
                for v in b[k]:
                    _msum_add(parts, v)
                dst[k] = parts
        return out

    def totals(self) -> np.ndarray:
        return np.array([math.fsum(p) for p in self._sum])

    def totals_sq(self) -> np.ndarray:
        return np.array([math.fsum(p) for p in self._sumsq])

    def mean(self) -> np.ndarray:
        if self.count == 0:
            return np.full(self.n_bins, np.nan)
        return self.totals() / self.count

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.full(self.n_bins, np.nan)
        m = self.mean()
        var = (self.totals_sq() - self.count * m * m) / (self.count - 1)
        return np.maximum(var, 0.0)

    def stderr(self) -> np.ndarray:
        return np.sqrt(self.variance() / self.count)

    def to_dict(self) -> dict:
        return {"label": self.label, "n_bins": self.n_bins, "count": self.count,
                "sum": self._sum, "sumsq": self._sumsq}

    @classmethod
    def from_dict(cls, d: dict) -> "ObservableAccumulator":
        return cls(d["label"], d["n_bins"], d["count"],
                   [list(p) for p in d["sum"]], [list(p) for p in d["sumsq"]])


def new_accumulators(L: int) -> dict[str, ObservableAccumulator]:
    half = L // 2
    sizes = {"cz": half + 1, "zz": half + 1, "z": 1, "cw": half + 1, "vq": half + 1, "qvar": 1}
    return {k: ObservableAccumulator(k, n) for k, n in sizes.items()}


def merge_all(a: dict[str, ObservableAccumulator], b: dict[str, ObservableAccumulator]):
    return {k: a[k].merge(b[k]) for k in a}


@dataclass
class CorrelatorSet:
    """Trajectory-averaged correlators with standard errors.

    ``cz``/``cw``/``vq`` are indexed by separation or interval length; the
    ``*_err`` arrays hold standard errors over circuit realizations.
    """

    L: int
    n_samples: int
    cz: np.ndarray
    cz_err: np.ndarray
    cw: np.ndarray
    cw_err: np.ndarray
    vq: np.ndarray
    vq_err: np.ndarray
    batches: dict[str, np.ndarray] | None = None

    @classmethod
    def from_accumulators(cls, L, accs, batch_accs=None) -> "CorrelatorSet":
        batches = None
        if batch_accs:
            batches = {k: np.array([b[k].mean() for b in batch_accs if b[k].count])
                       for k in ("cz", "cw", "vq")}
        return cls(L, accs["cz"].count,
                   accs["cz"].mean(), accs["cz"].stderr(),
                   accs["cw"].mean(), accs["cw"].stderr(),
                   accs["vq"].mean(), accs["vq"].stderr(), batches)


def sharpening_time(qvar_series, threshold: float = 0.01) -> float:
    """First step at which the total-charge variance drops below ``threshold``
    (``inf`` if it never does)."""
    below = np.flatnonzero(np.asarray(qvar_series) < threshold)
    return float(below[0]) if below.size else math.inf


def sharpening_diagnostics(series_per_trajectory, threshold: float = 0.01):
    """Ensemble mean Var(Q_total) per step and per-trajectory sharpening times."""
    arr = np.asarray(series_per_trajectory, dtype=float)
    times = np.array([sharpening_time(s, threshold) for s in arr])
    return arr.mean(axis=0), times
