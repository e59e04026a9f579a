"""Brick-wall circuit geometry, measurement placement and RNG streams.

Time is organised in *layers*: layer ``g`` is a gate layer (even bonds for
even ``g``, odd bonds for odd ``g``) followed by its measurement layer.  A
full time step is two layers, so a circuit of ``depth`` steps has
``2 * depth`` layers.  Between layers sit *slices* of world-line links:
slice 0 is the input of layer 0 and slice ``g + 1`` is the output of layer
``g`` (and the slice the measurements of layer ``g`` act on).
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
import math

import numpy as np

MODES = ("projective", "weak")

# sub-stream tags so placements and outcomes never share a key
PLACEMENT_STREAM = 0
OUTCOME_STREAM = 1
HISTORY_STREAM = 2


class SpecError(ValueError):
    """Invalid circuit specification; ``field`` names the offending entry."""

    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


def rng_stream(seed: int, stream_id: int, substream: int = 0) -> np.random.Generator:
    """Counter-based random stream keyed by ``(seed, stream_id, substream)``.

    Philox is a counter-based generator, so a stream is fully determined by
    its key; the trajectory index as ``stream_id`` makes results independent
    of which worker runs which trajectory.
    """
    ss = np.random.SeedSequence(int(seed) & 0xFFFFFFFFFFFFFFFF,
                                spawn_key=(int(stream_id) & 0xFFFFFFFFFFFFFFFF, int(substream)))
    return np.random.Generator(np.random.Philox(ss))


@dataclass(frozen=True)
class CircuitSpec:
    L: int
    depth: int
    p: float
    mode: str = "projective"
    gamma: float = 0.0
    dt: float = 0.0
    seed: int = 0
    boundary: str = field(default="periodic", init=False)

    def __post_init__(self):
        if not isinstance(self.L, (int, np.integer)) or self.L < 2 or self.L % 2:
            raise SpecError("L", f"must be an even integer >= 2, got {self.L!r}")
        if not isinstance(self.depth, (int, np.integer)) or self.depth < 1:
            raise SpecError("depth", f"must be an integer >= 1, got {self.depth!r}")
        if not (0.0 <= self.p <= 1.0):
            raise SpecError("p", f"must lie in [0, 1], got {self.p!r}")
        if self.mode not in MODES:
            raise SpecError("mode", f"must be one of {MODES}, got {self.mode!r}")
        if self.mode == "weak":
            for name in ("gamma", "dt"):
                v = getattr(self, name)
                if not (math.isfinite(v) and v > 0):
                    raise SpecError(name, f"must be finite and positive in weak mode, got {v!r}")
        if not (0 <= int(self.seed) < 2**64):
            raise SpecError("seed", "must be a 64-bit unsigned integer")

    @property
    def n_layers(self) -> int:
        return 2 * self.depth

    def to_config(self) -> str:
        """Human-readable ``key = value`` form, one entry per line."""
        return "\n".join(f"{f.name} = {getattr(self, f.name)}" for f in fields(self)) + "\n"

    @classmethod
    def from_config(cls, text: str) -> "CircuitSpec":
        raw = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            raw[key.strip()] = value.strip()
        raw.pop("boundary", None)
        kwargs = {}
        for name, conv in (("L", int), ("depth", int), ("p", float), ("mode", str),
                           ("gamma", float), ("dt", float), ("seed", int)):
            if name in raw:
                try:
                    kwargs[name] = conv(raw[name])
                except ValueError as exc:
                    raise SpecError(name, str(exc)) from None
        return cls(**kwargs)


def layer_bonds(L: int, layer: int) -> list[tuple[int, int]]:
    """Bonds of gate layer ``layer``; odd layers carry the wrap bond (L-1, 0)."""
    return [(i, (i + 1) % L) for i in range(layer % 2, L, 2)]


@dataclass(frozen=True, eq=False)
class CircuitRealization:
    """Measurement placements of one circuit; ``measured[g, i]`` is site ``i``
    of measurement layer ``g`` (acting on slice ``g + 1``)."""

    spec: CircuitSpec
    measured: np.ndarray

    @property
    def gate_bonds(self) -> list[list[tuple[int, int]]]:
        return [layer_bonds(self.spec.L, g) for g in range(self.spec.n_layers)]

    @property
    def measured_sites(self) -> list[list[int]]:
        return [np.flatnonzero(row).tolist() for row in self.measured]

    def __eq__(self, other):
        if not isinstance(other, CircuitRealization):
            return NotImplemented
        return self.spec == other.spec and np.array_equal(self.measured, other.measured)


def realize(spec: CircuitSpec, stream_id: int = 0) -> CircuitRealization:
    """Draw measurement placements; a deterministic function of ``(spec.seed, stream_id)``."""
    rng = rng_stream(spec.seed, stream_id, PLACEMENT_STREAM)
    u = rng.random((spec.n_layers, spec.L))
    measured = u < spec.p
    measured.flags.writeable = False
    return CircuitRealization(spec, measured)
