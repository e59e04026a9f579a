"""Trajectory-conditional charge distributions and their evolution.

A charge configuration is an integer whose bit ``i`` is 1 when site ``i``
carries charge +1 and 0 for charge -1.  A :class:`ChargeDistribution` holds
the dense probability vector over all ``2**L`` configurations.  Gates use the
gate-averaged kernel (equal mixing of the two configurations of a bond in the
charge-0 sector); measurements sample outcomes from the Born distribution and
condition on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import math
import struct
from typing import Callable, Sequence

import numba as nb
import numpy as np

from .circuit import OUTCOME_STREAM, CircuitRealization, CircuitSpec, realize, rng_stream

MAX_L = 22
DEGENERATE_MASS = 1e-300


class DegenerateStateError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# kernels

@nb.njit(cache=True)
def _gate(w, i, j):
    mi = 1 << i
    mj = 1 << j
    for idx in range(w.shape[0]):
        if (idx & mi) != 0 and (idx & mj) == 0:
            k = idx ^ mi ^ mj
            a = 0.5 * (w[idx] + w[k])
            w[idx] = a
            w[k] = a


@nb.njit(cache=True)
def _gate_layer(w, L, parity):
    for i in range(parity, L, 2):
        _gate(w, i, (i + 1) % L)


@nb.njit(cache=True)
def _site_masses(w, i):
    m = 1 << i
    plus = 0.0
    minus = 0.0
    for idx in range(w.shape[0]):
        if idx & m:
            plus += w[idx]
        else:
            minus += w[idx]
    return minus, plus


@nb.njit(cache=True)
def _project(w, i, bit, mass):
    m = 1 << i
    inv = 1.0 / mass
    for idx in range(w.shape[0]):
        if ((idx & m) != 0) == (bit == 1):
            w[idx] *= inv
        else:
            w[idx] = 0.0


@nb.njit(cache=True)
def _reweight_weak(w, i, outcome, gdt):
    m = 1 << i
    f_plus = math.exp(-0.5 * gdt * (1.0 - outcome) ** 2)
    f_minus = math.exp(-0.5 * gdt * (-1.0 - outcome) ** 2)
    total = 0.0
    for idx in range(w.shape[0]):
        if idx & m:
            w[idx] *= f_plus
        else:
            w[idx] *= f_minus
        total += w[idx]
    inv = 1.0 / total
    for idx in range(w.shape[0]):
        w[idx] *= inv
    return total


@nb.njit(cache=True)
def _projective_layers(w, L, measured, uniforms, start, stop, outcomes):
    """Apply layers ``start..stop-1``; writes +/-1 (or 0 if unmeasured) into
    ``outcomes`` and returns (log-norm increment, status)."""
    log_inc = 0.0
    for g in range(start, stop):
        _gate_layer(w, L, g % 2)
        for i in range(L):
            if not measured[g, i]:
                continue
            minus, plus = _site_masses(w, i)
            total = minus + plus
            if uniforms[g, i] * total < plus:
                bit = 1
                mass = plus
            else:
                bit = 0
                mass = minus
            if mass < 1e-300:
                return log_inc, 1
            prob = mass / total
            # renormalise to the branch; total drifts from 1 only by rounding
            _project(w, i, bit, mass)
            log_inc += math.log(prob)
            outcomes[g, i] = 1 if bit == 1 else -1
    return log_inc, 0


# --------------------------------------------------------------------------
# distributions

@dataclass
class ChargeDistribution:
    L: int
    weights: np.ndarray
    log_norm: float = 0.0

    def __post_init__(self):
        if self.L > MAX_L:
            raise ValueError(f"L={self.L} exceeds the dense-vector cap of {MAX_L}")
        if self.weights.shape != (1 << self.L,):
            raise ValueError(f"expected {1 << self.L} weights, got {self.weights.shape}")

    @classmethod
    def uniform(cls, L: int) -> "ChargeDistribution":
        n = 1 << L
        return cls(L, np.full(n, 1.0 / n))

    @classmethod
    def delta(cls, L: int, config: int) -> "ChargeDistribution":
        w = np.zeros(1 << L)
        w[config] = 1.0
        return cls(L, w)

    @classmethod
    def two_sector(cls, L: int, n_plus: int, frac: float = 0.5) -> "ChargeDistribution":
        """Mixture of the sectors with ``n_plus`` and ``n_plus + 1`` positive
        charges (weights ``frac`` and ``1 - frac``), uniform inside each."""
        if not 0 <= n_plus < L:
            raise ValueError("n_plus must satisfy 0 <= n_plus < L")
        counts = popcounts(L)
        w = np.zeros(1 << L)
        lo = counts == n_plus
        hi = counts == n_plus + 1
        w[lo] = frac / lo.sum()
        w[hi] = (1.0 - frac) / hi.sum()
        return cls(L, w)

    def copy(self) -> "ChargeDistribution":
        return ChargeDistribution(self.L, self.weights.copy(), self.log_norm)

    def total(self) -> float:
        return float(self.weights.sum())

    def site_plus(self, site: int) -> float:
        minus, plus = _site_masses(self.weights, site)
        return plus / (minus + plus)

    def marginals(self) -> np.ndarray:
        """P(charge +1) for every site."""
        return np.array([self.site_plus(i) for i in range(self.L)])

    def charge_moments(self) -> tuple[float, float]:
        """Mean and variance of the total charge sum_i sigma^z_i."""
        q = 2.0 * popcounts(self.L) - self.L
        mean = float(self.weights @ q)
        return mean, float(self.weights @ (q - mean) ** 2)

    def sector_weights(self) -> np.ndarray:
        """Total weight in each sector, indexed by the number of +1 charges."""
        return np.bincount(popcounts(self.L), weights=self.weights, minlength=self.L + 1)


_POPCOUNT_CACHE: dict[int, np.ndarray] = {}


def popcounts(L: int) -> np.ndarray:
    if L not in _POPCOUNT_CACHE:
        idx = np.arange(1 << L, dtype=np.int64)
        counts = np.zeros(1 << L, dtype=np.int64)
        for i in range(L):
            counts += (idx >> i) & 1
        _POPCOUNT_CACHE[L] = counts
    return _POPCOUNT_CACHE[L]


@dataclass(frozen=True)
class MeasurementRecord:
    layer: int
    site: int
    outcome: float


def _check_adjacent(L, bond):
    i, j = bond
    if not (0 <= i < L and 0 <= j < L) or (j - i) % L not in (1, L - 1):
        raise ValueError(f"bond {bond} is not a nearest-neighbour pair on a ring of {L}")


def apply_gate(dist: ChargeDistribution, bond: tuple[int, int]) -> ChargeDistribution:
    """Gate-averaged two-site gate, in place."""
    _check_adjacent(dist.L, bond)
    before = dist.weights.sum()
    _gate(dist.weights, bond[0], bond[1])
    assert abs(dist.weights.sum() - before) <= 1e-10, "gate changed the total weight"
    return dist


def _draw_outcome(dist, site, u):
    minus, plus = _site_masses(dist.weights, site)
    total = minus + plus
    bit = 1 if u * total < plus else 0
    mass = plus if bit else minus
    if mass < DEGENERATE_MASS:
        raise DegenerateStateError(f"sampled branch at site {site} has mass {mass:g}")
    _project(dist.weights, site, bit, mass)
    dist.log_norm += math.log(mass / total)
    return 1 if bit else -1


def measure_projective(dist: ChargeDistribution, site: int, rng: np.random.Generator,
                       layer: int = -1) -> tuple[ChargeDistribution, MeasurementRecord]:
    """Born-sample the charge at ``site`` and condition on it (in place)."""
    outcome = _draw_outcome(dist, site, rng.random())
    return dist, MeasurementRecord(layer, site, outcome)


def _weak_update(dist, site, gdt, u, z):
    minus, plus = _site_masses(dist.weights, site)
    sigma = 1.0 if u * (minus + plus) < plus else -1.0
    if gdt == 0.0:
        return z
    m = sigma + z / math.sqrt(gdt)
    if not math.isfinite(m):
        raise FloatingPointError(f"non-finite weak outcome {m}")
    total = _reweight_weak(dist.weights, site, m, gdt)
    dist.log_norm += math.log(total)
    return m


def measure_weak(dist: ChargeDistribution, site: int, gamma: float, dt: float,
                 rng: np.random.Generator, layer: int = -1) -> tuple[ChargeDistribution, MeasurementRecord]:
    """Gaussian weak measurement of ``site`` with strength ``gamma * dt``.

    The outcome is drawn from the exact mixture sum_n P(n) N(m; sigma_n, 1/(gamma dt))
    by first drawing sigma from the site marginal.  With ``gamma * dt == 0`` the
    outcome is unit Gaussian noise and the distribution is left unchanged.
    """
    gdt = gamma * dt
    if gdt < 0 or not math.isfinite(gdt):
        raise ValueError("gamma * dt must be finite and non-negative")
    u = rng.random()
    z = rng.standard_normal()
    m = _weak_update(dist, site, gdt, u, z)
    return dist, MeasurementRecord(layer, site, m)


def step(dist: ChargeDistribution, realization: CircuitRealization, layer: int,
         rng: np.random.Generator) -> tuple[ChargeDistribution, list[MeasurementRecord]]:
    """One gate layer followed by its measurement layer, in place.

    Consumes ``L`` uniforms from ``rng`` (plus ``L`` normals in weak mode) per
    layer whether or not a site is measured, so the stream position depends
    only on the layer index.
    """
    spec = realization.spec
    L = spec.L
    _gate_layer(dist.weights, L, layer % 2)
    u = rng.random(L)
    records = []
    if spec.mode == "weak":
        z = rng.standard_normal(L)
        gdt = spec.gamma * spec.dt
        for i in np.flatnonzero(realization.measured[layer]):
            m = _weak_update(dist, int(i), gdt, u[i], z[i])
            records.append(MeasurementRecord(layer, int(i), m))
    else:
        for i in np.flatnonzero(realization.measured[layer]):
            records.append(MeasurementRecord(layer, int(i), _draw_outcome(dist, int(i), u[i])))
    return dist, records


# --------------------------------------------------------------------------
# trajectories

@dataclass
class Trajectory:
    dist: ChargeDistribution
    snapshot_steps: list[int]
    snapshots: list
    layers: np.ndarray = field(repr=False)
    sites: np.ndarray = field(repr=False)
    outcomes: np.ndarray = field(repr=False)

    @property
    def records(self) -> list[MeasurementRecord]:
        return [MeasurementRecord(int(g), int(i), float(m))
                for g, i, m in zip(self.layers, self.sites, self.outcomes)]


def run_trajectory(spec: CircuitSpec, stream_id: int, *,
                   snapshot_steps: Sequence[int] = (),
                   observe: Callable[[ChargeDistribution], object] | None = None,
                   realization: CircuitRealization | None = None,
                   initial: ChargeDistribution | None = None) -> Trajectory:
    """Evolve one trajectory over ``spec.depth`` full steps.

    Placements come from ``realize(spec, stream_id)`` unless a fixed
    ``realization`` is supplied; outcomes always come from the trajectory's
    own stream.  ``snapshot_steps`` lists full-step counts (1..depth) after
    which ``observe(dist)`` is recorded (a copy of the weights by default).
    """
    if realization is None:
        realization = realize(spec, stream_id)
    L = spec.L
    dist = initial.copy() if initial is not None else ChargeDistribution.uniform(L)
    if dist.L != L:
        raise ValueError("initial distribution has the wrong size")
    observe = observe or (lambda d: d.weights.copy())
    wanted = sorted(set(int(s) for s in snapshot_steps))
    if wanted and (wanted[0] < 0 or wanted[-1] > spec.depth):
        raise ValueError("snapshot steps must lie in [0, depth]")
    rng = rng_stream(spec.seed, stream_id, OUTCOME_STREAM)
    snaps = []
    if wanted and wanted[0] == 0:
        snaps.append(observe(dist))

    if spec.mode == "projective":
        uniforms = rng.random((spec.n_layers, L))
        outcomes = np.zeros((spec.n_layers, L), dtype=np.int8)
        start = 0
        for t in wanted + [spec.depth]:
            if t == 0:
                continue
            stop = 2 * t
            if stop > start:
                inc, status = _projective_layers(dist.weights, L, realization.measured,
                                                 uniforms, start, stop, outcomes)
                dist.log_norm += inc
                if status:
                    raise DegenerateStateError("sampled a measurement branch of vanishing mass")
                start = stop
            if t in wanted and len(snaps) < len(wanted):
                snaps.append(observe(dist))
        g, i = np.nonzero(realization.measured)
        return Trajectory(dist, wanted, snaps, g, i, outcomes[g, i].astype(float))

    records: list[MeasurementRecord] = []
    wanted_set = set(wanted)
    for t in range(1, spec.depth + 1):
        for layer in (2 * t - 2, 2 * t - 1):
            _, rec = step(dist, realization, layer, rng)
            records.extend(rec)
        if t in wanted_set:
            snaps.append(observe(dist))
    return Trajectory(dist, wanted, snaps,
                      np.array([r.layer for r in records], dtype=np.int64),
                      np.array([r.site for r in records], dtype=np.int64),
                      np.array([r.outcome for r in records], dtype=float))


# --------------------------------------------------------------------------
# binary dump

DUMP_MAGIC = b"CSTR"
DUMP_VERSION = 1
_HEADER = struct.Struct("<4sHHII")
_RECORD = np.dtype([("layer", "<u4"), ("site", "<u2"), ("pad", "<u2"), ("outcome", "<f8")])


def write_dump(path, traj: Trajectory) -> None:
    """Little-endian record file: header, measurement records, then one
    ``(step, P(+1) per site)`` row per snapshot."""
    L = traj.dist.L
    recs = np.zeros(len(traj.layers), dtype=_RECORD)
    recs["layer"] = traj.layers
    recs["site"] = traj.sites
    recs["outcome"] = traj.outcomes
    marg = []
    for s in traj.snapshots:
        w = np.asarray(s)
        if w.shape != (1 << L,):
            raise ValueError("dump needs weight-vector snapshots")
        marg.append(ChargeDistribution(L, w).marginals())
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(DUMP_MAGIC, DUMP_VERSION, L, len(recs), len(marg)))
        fh.write(recs.tobytes())
        for t, m in zip(traj.snapshot_steps, marg):
            fh.write(struct.pack("<I", t))
            fh.write(np.asarray(m, dtype="<f8").tobytes())


def read_dump(path) -> dict:
    with open(path, "rb") as fh:
        data = fh.read()
    magic, version, L, n_rec, n_snap = _HEADER.unpack_from(data, 0)
    if magic != DUMP_MAGIC:
        raise ValueError("not a trajectory dump")
    if version != DUMP_VERSION:
        raise ValueError(f"unsupported dump version {version}")
    off = _HEADER.size
    recs = np.frombuffer(data, dtype=_RECORD, count=n_rec, offset=off)
    off += recs.nbytes
    steps, marg = [], []
    for _ in range(n_snap):
        steps.append(struct.unpack_from("<I", data, off)[0])
        off += 4
        marg.append(np.frombuffer(data, dtype="<f8", count=L, offset=off))
        off += 8 * L
    return {"L": L, "version": version, "layers": recs["layer"].astype(int),
            "sites": recs["site"].astype(int), "outcomes": recs["outcome"].astype(float),
            "snapshot_steps": steps, "marginals": marg}
