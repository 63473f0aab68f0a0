"""Core value types shared by every part of the simulator.

All state lives in flat 3n vectors ordered vertex-major: [x0,y0,z0, x1,...].
Types are immutable after construction (arrays are marked read-only), so they
can be shared freely across threads; evolution happens by building successors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.sparse as sp

# vacuum Coulomb constant, N*m^2/C^2
COULOMB_CONSTANT = 8.9875517923e9


class SimulationError(Exception):
    """Base class for simulation failures."""


class ConfigError(SimulationError):
    """Invalid scene, mesh or parameter data."""


class DivergenceError(SimulationError):
    """The integrator produced a non-finite state."""

    def __init__(self, message: str, step_index: int | None = None, trajectory=None):
        super().__init__(message)
        self.step_index = step_index
        self.trajectory = trajectory


class FactorizationError(SimulationError):
    """The system matrix could not be factorized (ill-conditioned)."""


class PointLocationError(SimulationError):
    """A charge lies outside the current domain grid; the grid must be rebuilt."""


def frozen_array(values, dtype=float) -> np.ndarray:
    """Copy `values` into a read-only ndarray."""
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


def as_points(x: np.ndarray) -> np.ndarray:
    """View a flat 3n vector as an (n, 3) point array."""
    return np.asarray(x).reshape(-1, 3)


@dataclass(frozen=True)
class SimState:
    """Positions, velocities and previous positions of n point masses."""

    positions: np.ndarray       # (3n,) m
    velocities: np.ndarray      # (3n,) m/s
    prev_positions: np.ndarray  # (3n,) m
    time: float = 0.0

    def __post_init__(self):
        pos = frozen_array(self.positions)
        vel = frozen_array(self.velocities)
        prev = frozen_array(self.prev_positions)
        if pos.ndim != 1 or pos.size == 0 or pos.size % 3 != 0:
            raise ConfigError(f"positions must be a non-empty flat 3n vector, got shape {pos.shape}")
        if vel.shape != pos.shape or prev.shape != pos.shape:
            raise ConfigError("positions, velocities and prev_positions must have identical shape")
        for name, arr in (("positions", pos), ("velocities", vel), ("prev_positions", prev)):
            if not np.all(np.isfinite(arr)):
                raise DivergenceError(f"non-finite entries in {name}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(self, "prev_positions", prev)
        object.__setattr__(self, "time", float(self.time))

    @property
    def vertex_count(self) -> int:
        return self.positions.size // 3

    def points(self) -> np.ndarray:
        return as_points(self.positions)

    @staticmethod
    def at_rest(points: np.ndarray, time: float = 0.0) -> "SimState":
        """State with zero velocity whose history is consistent with standing still."""
        x = np.asarray(points, dtype=float).reshape(-1)
        return SimState(x, np.zeros_like(x), x.copy(), time)


@dataclass(frozen=True)
class MassModel:
    """Per-vertex masses in kg; each vertex contributes three equal diagonal entries."""

    masses: np.ndarray  # (n,) kg

    def __post_init__(self):
        m = frozen_array(self.masses)
        if m.ndim != 1 or m.size == 0:
            raise ConfigError("masses must be a non-empty 1-d vector")
        if not np.all(np.isfinite(m)) or np.any(m <= 0.0):
            raise ConfigError("every mass must be finite and > 0")
        object.__setattr__(self, "masses", m)

    @property
    def vertex_count(self) -> int:
        return self.masses.size

    def diagonal(self) -> np.ndarray:
        """The 3n diagonal of the assembled mass matrix."""
        return np.repeat(self.masses, 3)

    @staticmethod
    def uniform(n: int, mass: float = 1.0) -> "MassModel":
        return MassModel(np.full(n, float(mass)))


def assemble_mass_matrix(masses: MassModel) -> sp.csc_matrix:
    """Diagonal 3n x 3n mass matrix with each vertex mass replicated per axis."""
    return sp.diags(masses.diagonal(), format="csc")


@dataclass(frozen=True)
class SpringTopology:
    """Springs between vertex pairs with per-spring stiffness and rest length."""

    vertex_count: int
    i: np.ndarray            # (s,) first endpoint index
    j: np.ndarray            # (s,) second endpoint index
    stiffness: np.ndarray    # (s,) N/m
    rest_length: np.ndarray  # (s,) m

    def __post_init__(self):
        n = int(self.vertex_count)
        i = frozen_array(self.i, dtype=np.int64)
        j = frozen_array(self.j, dtype=np.int64)
        k = frozen_array(self.stiffness)
        l0 = frozen_array(self.rest_length)
        if n < 1:
            raise ConfigError("vertex_count must be >= 1")
        if not (i.shape == j.shape == k.shape == l0.shape) or i.ndim != 1:
            raise ConfigError("spring arrays must be 1-d and equally sized")
        if i.size:
            if np.any(i == j):
                raise ConfigError("springs must connect distinct vertices")
            if np.any((i < 0) | (i >= n) | (j < 0) | (j >= n)):
                raise ConfigError("spring endpoint index out of range")
            if np.any(~np.isfinite(k)) or np.any(k <= 0.0):
                raise ConfigError("spring stiffness must be finite and > 0")
            if np.any(~np.isfinite(l0)) or np.any(l0 < 0.0):
                raise ConfigError("rest length must be finite and >= 0")
            lo = np.minimum(i, j)
            hi = np.maximum(i, j)
            pairs = lo * n + hi
            if np.unique(pairs).size != pairs.size:
                raise ConfigError("duplicate spring between the same vertex pair")
        object.__setattr__(self, "vertex_count", n)
        object.__setattr__(self, "i", i)
        object.__setattr__(self, "j", j)
        object.__setattr__(self, "stiffness", k)
        object.__setattr__(self, "rest_length", l0)

    @property
    def spring_count(self) -> int:
        return self.i.size

    @staticmethod
    def from_springs(springs: Sequence[tuple], vertex_count: int) -> "SpringTopology":
        """Build from (i, j, stiffness, rest_length) tuples."""
        if len(springs) == 0:
            empty = np.zeros(0)
            return SpringTopology(vertex_count, empty.astype(int), empty.astype(int), empty, empty)
        arr = np.array([(int(a), int(b), float(k), float(l)) for a, b, k, l in springs])
        return SpringTopology(vertex_count, arr[:, 0].astype(int), arr[:, 1].astype(int), arr[:, 2], arr[:, 3])

    def with_stiffness(self, stiffness: np.ndarray) -> "SpringTopology":
        return SpringTopology(self.vertex_count, self.i, self.j, np.asarray(stiffness, dtype=float), self.rest_length)


@dataclass(frozen=True)
class ChargeSet:
    """Per-vertex charges in Coulombs plus the Coulomb constant to use."""

    charges: np.ndarray  # (n,) C
    coulomb_constant: float = COULOMB_CONSTANT

    def __post_init__(self):
        q = frozen_array(self.charges)
        if q.ndim != 1 or q.size == 0:
            raise ConfigError("charges must be a non-empty 1-d vector")
        if not np.all(np.isfinite(q)):
            raise ConfigError("charges must be finite")
        if not (np.isfinite(self.coulomb_constant) and self.coulomb_constant > 0.0):
            raise ConfigError("coulomb_constant must be > 0")
        object.__setattr__(self, "charges", q)
        object.__setattr__(self, "coulomb_constant", float(self.coulomb_constant))

    @property
    def vertex_count(self) -> int:
        return self.charges.size

    def with_charges(self, charges: np.ndarray) -> "ChargeSet":
        return ChargeSet(np.asarray(charges, dtype=float), self.coulomb_constant)

    @staticmethod
    def uniform(n: int, charge: float, coulomb_constant: float = COULOMB_CONSTANT) -> "ChargeSet":
        return ChargeSet(np.full(n, float(charge)), coulomb_constant)


@dataclass(frozen=True)
class SimParams:
    """Knobs of one simulation run."""

    h: float                              # timestep, s
    local_global_iterations: int = 1      # alternations per implicit step
    local_global_tol: float = 0.0         # early-stop threshold on the iterate change; 0 = fixed count
    ddef_enabled: bool = False
    ddef_m: int = 1000                    # grid sample count for the far-field approximation
    ddef_margin: float = 0.05             # relative bounding-box expansion per axis
    reuse_grid_frames: int = 1            # frames a domain grid is kept before a rebuild
    softening_epsilon: float = 1e-6       # minimum effective pair distance, m
    gravity: np.ndarray = (0.0, 0.0, 0.0)  # m/s^2

    def __post_init__(self):
        g = frozen_array(self.gravity)
        if g.shape != (3,):
            raise ConfigError("gravity must be a 3-vector")
        if not (np.isfinite(self.h) and self.h > 0.0):
            raise ConfigError("timestep h must be > 0")
        if int(self.local_global_iterations) < 1:
            raise ConfigError("local_global_iterations must be >= 1")
        if int(self.ddef_m) < 8:
            raise ConfigError("ddef_m must be >= 8")
        if self.softening_epsilon < 0.0:
            raise ConfigError("softening_epsilon must be >= 0")
        if int(self.reuse_grid_frames) < 1:
            raise ConfigError("reuse_grid_frames must be >= 1")
        object.__setattr__(self, "h", float(self.h))
        object.__setattr__(self, "local_global_iterations", int(self.local_global_iterations))
        object.__setattr__(self, "local_global_tol", float(self.local_global_tol))
        object.__setattr__(self, "ddef_m", int(self.ddef_m))
        object.__setattr__(self, "ddef_margin", float(self.ddef_margin))
        object.__setattr__(self, "reuse_grid_frames", int(self.reuse_grid_frames))
        object.__setattr__(self, "softening_epsilon", float(self.softening_epsilon))
        object.__setattr__(self, "gravity", g)

    def replace(self, **kw) -> "SimParams":
        data = {
            "h": self.h,
            "local_global_iterations": self.local_global_iterations,
            "local_global_tol": self.local_global_tol,
            "ddef_enabled": self.ddef_enabled,
            "ddef_m": self.ddef_m,
            "ddef_margin": self.ddef_margin,
            "reuse_grid_frames": self.reuse_grid_frames,
            "softening_epsilon": self.softening_epsilon,
            "gravity": self.gravity,
        }
        data.update(kw)
        return SimParams(**data)


# an external field maps (n, 3) points to (n, 3) field vectors in N/C
FieldFunction = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ExternalForcing:
    """Constant per-vertex forces, an optional vector field, and free charges."""

    constant_force: Optional[np.ndarray] = None   # (3n,) N
    field: Optional[FieldFunction] = None
    field_expression: str = ""                    # source text of `field` when it was parsed
    external_positions: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros((0, 3)))
    external_charges: np.ndarray = dataclasses.field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        if self.constant_force is not None:
            f = frozen_array(self.constant_force)
            if f.ndim != 1 or f.size % 3 != 0:
                raise ConfigError("constant_force must be a flat 3n vector")
            object.__setattr__(self, "constant_force", f)
        pos = frozen_array(self.external_positions).reshape(-1, 3)
        q = frozen_array(self.external_charges).reshape(-1)
        if pos.shape[0] != q.shape[0]:
            raise ConfigError("external charge positions and values must pair up")
        object.__setattr__(self, "external_positions", pos)
        object.__setattr__(self, "external_charges", q)

    @property
    def is_zero(self) -> bool:
        return (
            self.constant_force is None
            and self.field is None
            and self.external_charges.size == 0
        )

    @staticmethod
    def none() -> "ExternalForcing":
        return ExternalForcing()

    def with_external_charges(self, positions: np.ndarray, charges: np.ndarray) -> "ExternalForcing":
        return ExternalForcing(
            self.constant_force, self.field, self.field_expression,
            np.asarray(positions, dtype=float).reshape(-1, 3),
            np.asarray(charges, dtype=float).reshape(-1),
        )


def external_charge_forces(
    points: np.ndarray,
    charges: ChargeSet,
    forcing: ExternalForcing,
    softening_epsilon: float,
) -> np.ndarray:
    """Forces (n, 3) on the vertices from free external charges."""
    n = points.shape[0]
    out = np.zeros((n, 3))
    if forcing.external_charges.size == 0:
        return out
    diff = points[:, None, :] - forcing.external_positions[None, :, :]  # (n, e, 3)
    dist = np.linalg.norm(diff, axis=2)
    dist = np.maximum(dist, max(softening_epsilon, np.finfo(float).tiny))
    scale = charges.coulomb_constant * charges.charges[:, None] * forcing.external_charges[None, :] / dist**3
    out += np.einsum("ne,ned->nd", scale, diff)
    return out


def net_external_force(
    state: SimState,
    forcing: ExternalForcing,
    charges: ChargeSet,
    masses: MassModel,
    gravity: np.ndarray,
    softening_epsilon: float = 1e-6,
) -> np.ndarray:
    """Total non-Coulomb-pair force vector (3n,): constant + field + free charges + gravity."""
    n = state.vertex_count
    if charges.vertex_count != n or masses.vertex_count != n:
        raise ConfigError("state, charges and masses disagree on vertex count")
    total = np.zeros(3 * n)
    if forcing.constant_force is not None:
        if forcing.constant_force.size != 3 * n:
            raise ConfigError("constant_force length does not match the state")
        total += forcing.constant_force
    pts = state.points()
    if forcing.field is not None:
        e = np.asarray(forcing.field(pts), dtype=float)
        if e.shape != (n, 3) or not np.all(np.isfinite(e)):
            raise ConfigError("field evaluation must return finite (n, 3) values")
        total += (charges.charges[:, None] * e).reshape(-1)
    if forcing.external_charges.size:
        total += external_charge_forces(pts, charges, forcing, softening_epsilon).reshape(-1)
    g = np.asarray(gravity, dtype=float)
    if np.any(g != 0.0):
        total += (masses.masses[:, None] * g[None, :]).reshape(-1)
    return total
