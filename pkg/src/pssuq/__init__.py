"""Periodic steady-state circuit simulation with polynomial-chaos UQ.

The package computes periodic steady states of forced and self-oscillating
nonlinear circuits and propagates Gaussian/uniform parameter variations
through them intrusively: the periodic solution (and, for oscillators, the
period itself) is expanded in an orthonormal polynomial-chaos basis whose
coefficients are solved for directly by a collocation-testing shooting
Newton method with an optional decoupled block Jacobian solve. A Monte
Carlo driver provides the reference baseline.
"""

__version__ = "0.1.0"

from .circuit import (
    Circuit,
    CircuitError,
    CircuitInstance,
    DaeEval,
    DistributionSpec,
    dc_operating_point,
)
from .netlist import NetlistError, load_netlist, parse_netlist

__all__ = [
    "Circuit",
    "CircuitError",
    "CircuitInstance",
    "DaeEval",
    "DistributionSpec",
    "NetlistError",
    "dc_operating_point",
    "load_netlist",
    "parse_netlist",
    "__version__",
]
