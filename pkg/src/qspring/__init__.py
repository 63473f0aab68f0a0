"""Charged mass-spring simulation toolkit.

Implicit spring integration with explicit Coulomb forces, a grid-approximated
far field for large charge counts, analytic gradients for parameter
estimation, and a live websocket service for interactive steering.
"""

from .model import (
    COULOMB_CONSTANT,
    ChargeSet,
    ConfigError,
    DivergenceError,
    ExternalForcing,
    FactorizationError,
    MassModel,
    PointLocationError,
    SimParams,
    SimState,
    SimulationError,
    SpringTopology,
)

__version__ = "0.1.0"

__all__ = [
    "COULOMB_CONSTANT",
    "ChargeSet",
    "ConfigError",
    "DivergenceError",
    "ExternalForcing",
    "FactorizationError",
    "MassModel",
    "PointLocationError",
    "SimParams",
    "SimState",
    "SimulationError",
    "SpringTopology",
    "__version__",
]
