"""Charge-sharp links on the space-time circuit graph and their percolation.

The circuit graph has one *link* per (slice, site) and one vertex per gate;
gate ``(g, i)`` joins the input legs ``(g, i), (g, i+1)`` to the output legs
``(g+1, i), (g+1, i+1)``.  A link is charge sharp when the measurement
outcomes plus charge conservation at every gate force its value.
"""

from __future__ import annotations

from dataclasses import dataclass
import math

import numba as nb
import numpy as np

from .circuit import HISTORY_STREAM, CircuitRealization, CircuitSpec, realize, rng_stream

RULES = ("outcome", "structural", "measured")


def _deduction_table(use_values: bool):
    """Lookup ``key = known | values << 4`` -> (newly forced legs, their values).

    Legs are ordered (in_i, in_j, out_i, out_j); a value bit of 1 means +1.
    With ``use_values=False`` only the outcome-blind 3-of-4 rule fires.
    """
    forced = np.zeros(256, np.uint8)
    fvals = np.zeros(256, np.uint8)
    valid = [a for a in range(16) if (a & 1) + (a >> 1 & 1) == (a >> 2 & 1) + (a >> 3 & 1)]
    for known in range(16):
        for vals in range(16):
            if vals & ~known:
                continue
            consistent = [a for a in valid if a & known == vals]
            if not consistent:
                continue
            f = fv = 0
            for leg in range(4):
                if known >> leg & 1:
                    continue
                bits = {a >> leg & 1 for a in consistent}
                if len(bits) == 1 and (use_values or bin(known).count("1") == 3):
                    f |= 1 << leg
                    fv |= bits.pop() << leg
            forced[known | vals << 4] = f
            fvals[known | vals << 4] = fv
    return forced, fvals


_TABLES = {"outcome": _deduction_table(True), "structural": _deduction_table(False)}


@nb.njit(cache=True)
def _sweep_gate(sharp, value, g, i, L, forced, fvals):
    j = (i + 1) % L
    k = sharp[g, i] | sharp[g, j] << 1 | sharp[g + 1, i] << 2 | sharp[g + 1, j] << 3
    if k == 15:
        return False
    v = (value[g, i] | value[g, j] << 1 | value[g + 1, i] << 2 | value[g + 1, j] << 3) & k
    key = k | v << 4
    f = forced[key]
    if f == 0:
        return False
    fv = fvals[key]
    if f & 1:
        sharp[g, i] = 1
        value[g, i] = fv & 1
    if f & 2:
        sharp[g, j] = 1
        value[g, j] = fv >> 1 & 1
    if f & 4:
        sharp[g + 1, i] = 1
        value[g + 1, i] = fv >> 2 & 1
    if f & 8:
        sharp[g + 1, j] = 1
        value[g + 1, j] = fv >> 3 & 1
    return True


@nb.njit(cache=True)
def _propagate(sharp, value, L, S, forced, fvals, reverse_first):
    changed = True
    while changed:
        changed = False
        for half in range(2):
            backward = (half == 0) == reverse_first
            for gg in range(S):
                g = S - 1 - gg if backward else gg
                for i in range(g % 2, L, 2):
                    if _sweep_gate(sharp, value, g, i, L, forced, fvals):
                        changed = True


@nb.njit(cache=True)
def _gate_start(s, site, g, L):
    # first site of the gate in layer g that carries ``site``
    return site if site % 2 == g % 2 else (site - 1) % L


@nb.njit(cache=True)
def _propagate_worklist(sharp, value, L, S, forced, fvals):
    n_gates = S * (L // 2)
    stack = np.empty(n_gates + 2 * (S + 1) * L, np.int64)
    top = 0
    for g in range(S - 1, -1, -1):
        for i in range(L - 2 + g % 2, -1, -2):
            stack[top] = g * L + i
            top += 1
    while top > 0:
        top -= 1
        gid = stack[top]
        g = gid // L
        i = gid % L
        j = (i + 1) % L
        before = sharp[g, i] | sharp[g, j] << 1 | sharp[g + 1, i] << 2 | sharp[g + 1, j] << 3
        if not _sweep_gate(sharp, value, g, i, L, forced, fvals):
            continue
        after = sharp[g, i] | sharp[g, j] << 1 | sharp[g + 1, i] << 2 | sharp[g + 1, j] << 3
        new = after & ~before
        for leg in range(4):
            if not (new >> leg) & 1:
                continue
            site = i if leg % 2 == 0 else j
            if leg < 2 and g >= 1:
                stack[top] = (g - 1) * L + _gate_start(g, site, g - 1, L)
                top += 1
            elif leg >= 2 and g + 1 < S:
                stack[top] = (g + 1) * L + _gate_start(g + 1, site, g + 1, L)
                top += 1


@nb.njit(cache=True)
def _sample_history(L, S, u0, coins):
    h = np.empty((S + 1, L), np.int8)
    for i in range(L):
        h[0, i] = 1 if u0[i] < 0.5 else -1
    for g in range(S):
        for i in range(g % 2, L, 2):
            j = (i + 1) % L
            a = h[g, i]
            b = h[g, j]
            if a != b and coins[g, i] < 0.5:
                a, b = b, a
            h[g + 1, i] = a
            h[g + 1, j] = b
    return h


# --------------------------------------------------------------------------
# sharpness

def measured_links(realization: CircuitRealization) -> np.ndarray:
    """Boolean (slices, sites) mask of measured links; slice 0 is never measured."""
    spec = realization.spec
    m = np.zeros((spec.n_layers + 1, spec.L), dtype=bool)
    m[1:] = realization.measured
    return m


def sample_history(realization: CircuitRealization, stream_id: int = 0) -> np.ndarray:
    """One charge history (+/-1 per link) drawn from the gate-averaged process.

    In the charge-diagonal limit a measurement only conditions on the hidden
    history, so reading this history off at the measured links yields
    outcomes with exactly the Born distribution.
    """
    spec = realization.spec
    rng = rng_stream(spec.seed, stream_id, HISTORY_STREAM)
    u0 = rng.random(spec.L)
    coins = rng.random((spec.n_layers, spec.L))
    return _sample_history(spec.L, spec.n_layers, u0, coins)


@dataclass
class SharpLattice:
    realization: CircuitRealization
    sharp: np.ndarray        # (slices, L) bool
    value: np.ndarray        # (slices, L) int8, +/-1 on sharp links, 0 elsewhere

    @property
    def fraction(self) -> float:
        return float(self.sharp[1:].mean())


def propagate_sharpness(realization: CircuitRealization, outcomes: np.ndarray | None = None,
                        rule: str = "outcome", order: str = "worklist") -> SharpLattice:
    """Closure of the measured links under single-gate charge conservation.

    ``outcomes`` is a (slices, L) array of +/-1 on measured links (anything
    elsewhere is ignored).  ``rule="outcome"`` deduces every leg forced by
    the known legs and their values (e.g. two equal inputs fix both outputs);
    ``"structural"`` is the outcome-blind rule: three known legs fix the
    fourth; ``"measured"`` skips propagation.

    The fixed point does not depend on the order deductions are made in;
    ``order`` picks a gate worklist (default), or repeated forward-then-backward
    (``"forward"``) or backward-then-forward (``"backward"``) sweeps.
    """
    if rule not in RULES:
        raise ValueError(f"rule must be one of {RULES}")
    spec = realization.spec
    if spec.mode != "projective":
        raise ValueError("sharpness needs projective measurements")
    m = measured_links(realization)
    sharp = m.astype(np.uint8)
    if outcomes is None:
        if rule == "outcome":
            raise ValueError("the outcome rule needs measurement outcomes")
        outcomes = np.ones(m.shape, dtype=np.int8)
    value = np.where(m, (np.asarray(outcomes) > 0).astype(np.uint8), 0).astype(np.uint8)
    if rule != "measured":
        forced, fvals = _TABLES[rule]
        if order == "worklist":
            _propagate_worklist(sharp, value, spec.L, spec.n_layers, forced, fvals)
        elif order in ("forward", "backward"):
            _propagate(sharp, value, spec.L, spec.n_layers, forced, fvals, order == "backward")
        else:
            raise ValueError(f"unknown propagation order {order!r}")
    sharp_b = sharp.astype(bool)
    signed = np.where(sharp_b, 2 * value.astype(np.int8) - 1, 0).astype(np.int8)
    return SharpLattice(realization, sharp_b, signed)


# --------------------------------------------------------------------------
# clusters

@nb.njit(cache=True)
def _find(parent, disp, x):
    d = 0
    r = x
    while parent[r] != r:
        d += disp[r]
        r = parent[r]
    # path compression keeping disp[y] = offset of y from the root
    y = x
    dy = d
    while parent[y] != y:
        nxt = parent[y]
        step = disp[y]
        parent[y] = r
        disp[y] = dy
        dy -= step
        y = nxt
    return r, d


@nb.njit(cache=True)
def _cluster(sharp, L, S, parent, disp, rank, wraps):
    """Union sharp legs sharing a gate; returns (any wrap, merge count).

    ``disp[x]`` is the horizontal offset of ``x`` relative to its parent,
    with the wrap bond counted as +1 from site L-1 to site 0.
    """
    merges = 0
    any_wrap = False
    for g in range(S):
        for i in range(g % 2, L, 2):
            j = (i + 1) % L
            nodes = (g * L + i, g * L + j, (g + 1) * L + i, (g + 1) * L + j)
            xs = (0, 1, 0, 1)
            for u in range(4):
                su = nodes[u] // L
                iu = nodes[u] % L
                if not sharp[su, iu]:
                    continue
                for v in range(u + 1, 4):
                    sv = nodes[v] // L
                    iv = nodes[v] % L
                    if not sharp[sv, iv]:
                        continue
                    ra, da = _find(parent, disp, nodes[u])
                    rb, db = _find(parent, disp, nodes[v])
                    want = xs[v] - xs[u]
                    if ra == rb:
                        if db - da != want:
                            wraps[ra] = True
                            any_wrap = True
                        continue
                    # offset of rb relative to ra
                    off = want - db + da
                    merges += 1
                    if rank[ra] < rank[rb]:
                        parent[ra] = rb
                        disp[ra] = -off
                        wraps[rb] = wraps[rb] or wraps[ra]
                    else:
                        parent[rb] = ra
                        disp[rb] = off
                        wraps[ra] = wraps[ra] or wraps[rb]
                        if rank[ra] == rank[rb]:
                            rank[ra] += 1
    return any_wrap, merges


class ClusterForest:
    """Union-find over the links of a :class:`SharpLattice`."""

    def __init__(self, lattice: SharpLattice):
        spec = lattice.realization.spec
        self.L = spec.L
        self.sharp = lattice.sharp
        n = self.sharp.size
        self.parent = np.arange(n, dtype=np.int64)
        self.rank = np.zeros(n, dtype=np.int64)
        self.disp = np.zeros(n, dtype=np.int64)
        self.wraps = np.zeros(n, dtype=np.bool_)
        self.any_wrap, self.merges = _cluster(self.sharp.astype(np.uint8), self.L, spec.n_layers,
                                              self.parent, self.disp, self.rank, self.wraps)

    def find(self, slice_: int, site: int) -> int:
        return int(_find(self.parent, self.disp, slice_ * self.L + site)[0])

    def offset(self, slice_: int, site: int) -> int:
        """Unwrapped horizontal offset of a link from its cluster root."""
        return int(_find(self.parent, self.disp, slice_ * self.L + site)[1])

    def labels(self) -> np.ndarray:
        """Root index per link, -1 for links that are not sharp."""
        out = np.full(self.sharp.shape, -1, dtype=np.int64)
        for s, i in zip(*np.nonzero(self.sharp)):
            out[s, i] = self.find(s, i)
        return out

    @property
    def n_clusters(self) -> int:
        return len(set(self.labels()[self.sharp].tolist()))


def adjacency(lattice: SharpLattice) -> ClusterForest:
    return ClusterForest(lattice)


# --------------------------------------------------------------------------
# wrapping statistics

def realization_wraps(spec: CircuitSpec, stream_id: int, rule: str) -> bool:
    realization = realize(spec, stream_id)
    outcomes = sample_history(realization, stream_id) if rule == "outcome" else None
    lattice = propagate_sharpness(realization, outcomes, rule)
    return ClusterForest(lattice).any_wrap


def wrap_probability(p: float, L: int, depth: int | None = None, n_realizations: int = 1000,
                     seed: int = 0, rule: str = "outcome", stream_offset: int = 0) -> tuple[float, float]:
    """Fraction of realizations with a spatially winding sharp cluster, and its
    binomial standard error.  ``depth`` defaults to ``2 * L`` full steps."""
    if n_realizations < 1:
        raise ValueError("need at least one realization")
    depth = 2 * L if depth is None else depth
    spec = CircuitSpec(L=L, depth=depth, p=p, seed=seed)
    hits = sum(realization_wraps(spec, stream_offset + k, rule) for k in range(n_realizations))
    P = hits / n_realizations
    return P, math.sqrt(P * (1 - P) / n_realizations)


def measured_link_percolation(p: float, L: int, depth: int | None = None, n_realizations: int = 1000,
                              seed: int = 0, stream_offset: int = 0) -> tuple[float, float]:
    return wrap_probability(p, L, depth, n_realizations, seed, "measured", stream_offset)


# --------------------------------------------------------------------------
# crossings and finite-size collapse

def curve_crossing(p: np.ndarray, a: np.ndarray, b: np.ndarray, err: np.ndarray | None = None) -> float:
    """Where curve ``b`` overtakes ``a`` (both sampled on ``p``).

    With ``err`` (the standard error of ``b - a``) only differences beyond two
    sigma count, so saturated tails where both curves sit at 0 or 1 cannot
    produce spurious sign flips.  The zero comes from a straight-line fit of
    ``b - a`` between the last significant negative point and the first
    significant positive one.
    """
    p = np.asarray(p, float)
    d = np.asarray(b, float) - np.asarray(a, float)
    s = np.sign(d)
    if err is not None:
        s = np.where(np.abs(d) > 2 * np.asarray(err, float), s, 0)
    neg, pos = np.flatnonzero(s < 0), np.flatnonzero(s > 0)
    after = pos[pos > neg[0]] if neg.size else pos[:0]
    if after.size == 0:
        if err is None and np.any(d == 0):
            zeros = np.flatnonzero(d == 0)
            return float(p[zeros[len(zeros) // 2]])
        raise ValueError("curves do not cross in the sampled range")
    j = after[0]
    i = neg[neg < j][-1]
    if j - i == 1:
        i, j = max(i - 1, 0), min(j + 1, len(p) - 1)
    slope, icpt = np.polyfit(p[i:j + 1], d[i:j + 1], 1)
    if slope <= 0:
        return float(0.5 * (p[i] + p[j]))
    return float(np.clip(-icpt / slope, p[i], p[j]))


def level_crossing(p: np.ndarray, P: np.ndarray, level: float = 0.5) -> float:
    """First p at which the (rising) curve reaches ``level``, linearly interpolated."""
    P = np.asarray(P, float)
    above = np.flatnonzero(P >= level)
    if above.size == 0 or above[0] == 0:
        raise ValueError("level not crossed inside the sampled range")
    k = above[0]
    return float(p[k - 1] + (level - P[k - 1]) * (p[k] - p[k - 1]) / (P[k] - P[k - 1]))


def collapse_score(curves: dict, p_c: float, nu: float) -> float:
    """Mean squared mismatch between curves after rescaling p -> (p - p_c) L**(1/nu).

    ``curves`` maps L to ``(p_values, P_values)``; every curve is compared
    with every other one by linear interpolation inside their common range.
    """
    if len(curves) < 3:
        raise ValueError("collapse needs at least three system sizes")
    scaled = {L: ((np.asarray(p, float) - p_c) * L ** (1.0 / nu), np.asarray(P, float))
              for L, (p, P) in curves.items()}
    total, count = 0.0, 0
    for La, (xa, ya) in scaled.items():
        for Lb, (xb, yb) in scaled.items():
            if La == Lb:
                continue
            order = np.argsort(xb)
            xb, yb = xb[order], yb[order]
            inside = (xa >= xb[0]) & (xa <= xb[-1])
            if not inside.any():
                continue
            diff = ya[inside] - np.interp(xa[inside], xb, yb)
            total += float(diff @ diff)
            count += int(inside.sum())
    return total / count if count else math.inf


@dataclass
class CollapseResult:
    p_c: float
    nu: float
    score: float
    p_grid: np.ndarray
    nu_grid: np.ndarray
    surface: np.ndarray

    def to_dict(self) -> dict:
        return {"argmin": {"p_c": self.p_c, "nu": self.nu, "score": self.score},
                "p_grid": self.p_grid.tolist(), "nu_grid": self.nu_grid.tolist(),
                "score_surface": self.surface.tolist()}


def scaling_collapse(curves: dict, p_grid=None, nu_grid=None) -> CollapseResult:
    """Grid search for the (p_c, nu) that best collapses the wrapping curves."""
    if len(curves) < 3:
        raise ValueError("collapse needs at least three system sizes")
    if p_grid is None:
        allp = np.concatenate([np.asarray(c[0], float) for c in curves.values()])
        p_grid = np.linspace(allp.min(), allp.max(), 61)
    if nu_grid is None:
        nu_grid = np.linspace(0.7, 2.5, 91)
    p_grid, nu_grid = np.asarray(p_grid, float), np.asarray(nu_grid, float)
    surface = np.array([[collapse_score(curves, pc, nu) for nu in nu_grid] for pc in p_grid])
    a, b = np.unravel_index(np.argmin(surface), surface.shape)
    return CollapseResult(float(p_grid[a]), float(nu_grid[b]), float(surface[a, b]),
                          p_grid, nu_grid, surface)


# --------------------------------------------------------------------------
# exact reference for small systems

def exact_sharpness(realization: CircuitRealization, outcomes: np.ndarray) -> np.ndarray:
    """Links whose value is identical in every charge history consistent with
    the outcomes, found by forward-backward support propagation over all
    ``2**L`` configurations per slice."""
    from .filter import _gate_layer
    spec = realization.spec
    L, S = spec.L, spec.n_layers
    if L > 12:
        raise ValueError("exact sharpness is limited to L <= 12")
    idx = np.arange(1 << L)
    bits = (idx[:, None] >> np.arange(L)) & 1
    m = measured_links(realization)

    def allowed(s):
        ok = np.ones(1 << L, dtype=bool)
        for i in np.flatnonzero(m[s]):
            ok &= bits[:, i] == (1 if outcomes[s, i] > 0 else 0)
        return ok

    fwd = [None] * (S + 1)
    w = np.where(allowed(0), 1.0, 0.0)
    fwd[0] = w / w.sum()
    for g in range(S):
        w = fwd[g].copy()
        _gate_layer(w, L, g % 2)
        w = np.where(allowed(g + 1), w, 0.0)
        fwd[g + 1] = w / w.sum()
    bwd = np.where(allowed(S), 1.0, 0.0)
    sharp = np.zeros((S + 1, L), dtype=bool)
    for s in range(S, -1, -1):
        post = fwd[s] * bwd
        support = post > 0
        sharp[s] = np.all(bits[support] == bits[support][0], axis=0)
        if s:
            # the averaged gate matrix is symmetric, so it also carries the backward message
            bwd = bwd.copy()
            _gate_layer(bwd, L, (s - 1) % 2)
            bwd = np.where(allowed(s - 1), bwd, 0.0)
            bwd /= bwd.max()
    return sharp
