"""Exact small-system references for the filter engine.

Everything here is deliberately written with plain numpy operations that
share no code with the numba kernels in :mod:`chargesharp.filter`.
"""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from functools import reduce

import numpy as np

from .circuit import CircuitRealization, CircuitSpec, layer_bonds, realize


class OracleSizeError(ValueError):
    pass


def _bits(L):
    idx = np.arange(1 << L)
    return (idx[:, None] >> np.arange(L)) & 1


def _pair_perm(L, i, j):
    idx = np.arange(1 << L)
    mixed = ((idx >> i) ^ (idx >> j)) & 1
    return idx ^ (mixed * ((1 << i) | (1 << j)))


@dataclass
class TrajectoryEnsemble:
    """All measurement-outcome histories of one realization with their Born weights."""

    L: int
    probs: np.ndarray        # (n_branches,)
    weights: np.ndarray      # (n_branches, 2**L) normalized final distributions
    outcomes: np.ndarray     # (n_branches, n_measurements), +/-1 in layer-major order

    @property
    def n_branches(self) -> int:
        return len(self.probs)

    def diag_expect(self, values: np.ndarray) -> np.ndarray:
        """Per-branch expectation of a diagonal observable given by its values."""
        return self.weights @ values

    def sigma(self, *sites: int) -> np.ndarray:
        """Per-branch <prod sigma^z_site>."""
        b = _bits(self.L)
        vals = np.ones(1 << self.L)
        for s in sites:
            vals = vals * (2 * b[:, s] - 1)
        return self.diag_expect(vals)

    def mean(self, per_branch: np.ndarray, weight_power: int = 1) -> float:
        """sum_b P_b**weight_power * value_b  (weight_power=1 is the Born average)."""
        return float(np.sum(self.probs ** weight_power * per_branch))


def enumerate_trajectories(spec: CircuitSpec, realization: CircuitRealization | None = None,
                           initial: np.ndarray | None = None,
                           max_branches: int = 1 << 20) -> TrajectoryEnsemble:
    """Breadth-first enumeration of every outcome history with nonzero probability."""
    if spec.mode != "projective":
        raise ValueError("enumeration needs projective measurements")
    if spec.L > 6 or spec.depth > 6:
        raise OracleSizeError("enumeration is limited to L <= 6 and depth <= 6")
    if realization is None:
        realization = realize(spec)
    L = spec.L
    W = (np.full((1, 1 << L), 1.0 / (1 << L)) if initial is None
         else np.asarray(initial, dtype=float)[None, :].copy())
    probs = np.ones(1)
    outcomes = np.zeros((1, 0), dtype=np.int8)
    bits = _bits(L)
    for g in range(spec.n_layers):
        for i, j in layer_bonds(L, g):
            W = 0.5 * (W + W[:, _pair_perm(L, i, j)])
        for site in np.flatnonzero(realization.measured[g]):
            plus_mask = bits[:, site] == 1
            new_W, new_p, new_o = [], [], []
            for bit, mask in ((1, plus_mask), (0, ~plus_mask)):
                branch = np.where(mask[None, :], W, 0.0)
                mass = branch.sum(axis=1)
                keep = mass > 0
                new_W.append(branch[keep] / mass[keep, None])
                new_p.append(probs[keep] * mass[keep])
                col = np.full((keep.sum(), 1), 1 if bit else -1, dtype=np.int8)
                new_o.append(np.hstack([outcomes[keep], col]))
            W = np.vstack(new_W)
            probs = np.concatenate(new_p)
            outcomes = np.vstack(new_o)
            if len(probs) > max_branches:
                raise OracleSizeError(f"more than {max_branches} outcome branches")
    return TrajectoryEnsemble(L, probs, W, outcomes)


# --------------------------------------------------------------------------
# replicated transfer matrix

_PAULI = {
    "x": np.array([[0, 1], [1, 0]], dtype=complex),
    # basis order (charge -1, charge +1)
    "y": np.array([[0, 1j], [-1j, 0]]),
    "z": np.array([[-1, 0], [0, 1]], dtype=complex),
}
TRIPLET_PROJECTOR = np.real(
    (sum(np.kron(_PAULI[a], _PAULI[a]) for a in "xyz") + 3 * np.eye(4)) / 4)


@dataclass
class ReplicaOracleState:
    L: int
    Q: int
    weights: np.ndarray   # flat, index = sum_a config_a << (a * L)

    @classmethod
    def uniform(cls, L: int, Q: int) -> "ReplicaOracleState":
        if Q not in (2, 3) or L > 8:
            raise OracleSizeError("replica oracle supports Q in {2, 3} and L <= 8")
        single = np.full(1 << L, 1.0 / (1 << L))
        return cls(L, Q, reduce(np.kron, [single] * Q))

    def _axis(self, replica, site):
        # C-order reshape puts the most significant bit on axis 0
        return self.L * self.Q - 1 - (replica * self.L + site)

    def apply_bond(self, i: int, j: int) -> None:
        n = self.L * self.Q
        T = TRIPLET_PROJECTOR.reshape(2, 2, 2, 2)
        t = self.weights.reshape((2,) * n)
        for a in range(self.Q):
            ai, aj = self._axis(a, i), self._axis(a, j)
            # kron(A_i, A_j) ordering: first factor is site i
            t = np.tensordot(T, t, axes=([2, 3], [ai, aj]))
            t = np.moveaxis(t, [0, 1], [ai, aj])
        self.weights = t.reshape(-1)

    def measure_site(self, i: int) -> None:
        """sum over m of prod_a delta(sigma_{a,i}, m): keep replica-agreeing configs."""
        idx = np.arange(self.weights.size)
        first = (idx >> i) & 1
        agree = np.ones(idx.size, dtype=bool)
        for a in range(1, self.Q):
            agree &= ((idx >> (a * self.L + i)) & 1) == first
        self.weights = np.where(agree, self.weights, 0.0)

    def expect(self, *diag_values: np.ndarray) -> float:
        """<1| O_1 (x) O_2 (x) ... (x) 1 |rho_Q>, one diagonal per leading replica."""
        t = self.weights.reshape((1 << self.L,) * self.Q)   # axis 0 = last replica
        for a, vals in enumerate(diag_values):
            shape = [1] * self.Q
            shape[self.Q - 1 - a] = 1 << self.L
            t = t * np.asarray(vals).reshape(shape)
        return float(t.sum())


def replica_transfer_step(state: ReplicaOracleState, realization: CircuitRealization,
                          layer: int) -> ReplicaOracleState:
    """Gate layer then measurement layer of the replicated (outcome-summed) transfer matrix."""
    if realization.spec.L != state.L:
        raise ValueError("state and realization sizes differ")
    for i, j in layer_bonds(state.L, layer):
        state.apply_bond(i, j)
    for site in np.flatnonzero(realization.measured[layer]):
        state.measure_site(int(site))
    return state


def replica_evolve(realization: CircuitRealization, Q: int) -> ReplicaOracleState:
    state = ReplicaOracleState.uniform(realization.spec.L, Q)
    for g in range(realization.spec.n_layers):
        replica_transfer_step(state, realization, g)
    return state


def sigma_values(L: int, *sites: int) -> np.ndarray:
    b = _bits(L)
    vals = np.ones(1 << L)
    for s in sites:
        vals = vals * (2 * b[:, s] - 1)
    return vals


# --------------------------------------------------------------------------
# two-sector sharpening toy model

def variance_decrement(L: int, N: int, frac) -> Fraction:
    """Exact expected drop of the total-charge variance from one site measurement.

    The chain holds ``N`` charges with probability ``frac`` and ``N + 1``
    otherwise; a measured site is occupied with probability ``N/L`` resp.
    ``(N+1)/L``.  Returns prior variance minus the Born-averaged posterior
    variance, as an exact fraction.
    """
    frac = Fraction(frac)
    if not (0 <= frac <= 1):
        raise ValueError("frac must lie in [0, 1]")
    if not (0 < N < L):
        raise ValueError("need 0 < N < L")
    prior = frac * (1 - frac)
    a, b = Fraction(N, L), Fraction(N + 1, L)
    expected = Fraction(0)
    for like_lo, like_hi in ((a, b), (1 - a, 1 - b)):
        p_out = frac * like_lo + (1 - frac) * like_hi
        if p_out == 0:
            continue
        post = frac * like_lo / p_out
        expected += p_out * post * (1 - post)
    return prior - expected


def variance_decrement_leading(L: int, N: int, frac: float) -> float:
    """Large-L form [frac(1-frac)]**2 / (N (L - N))."""
    return (frac * (1 - frac)) ** 2 / (N * (L - N))
