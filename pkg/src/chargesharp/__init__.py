"""Monte Carlo and exact tools for charge sharpening in monitored U(1) circuits
(charge-diagonal limit)."""

from .circuit import CircuitRealization, CircuitSpec, SpecError, realize
from .filter import ChargeDistribution, run_trajectory

__all__ = ["CircuitRealization", "CircuitSpec", "ChargeDistribution", "SpecError",
           "realize", "run_trajectory"]
__version__ = "0.1.0"
