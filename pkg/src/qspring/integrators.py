"""Time steppers and rollout machinery.

The production stepper treats springs implicitly (prefactored solve) and
Coulomb forces explicitly at the current positions. A position-Verlet stepper
over the exact forces serves as the reference in every validation, and a
forward-Euler stepper exists only as the worst-case baseline.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import coulomb
from .ddef import BruteForceBackend, DdefForceBackend
from .elastic import (
    ElasticOperators,
    PrefactoredSystem,
    assemble_operators,
    elastic_energy,
    local_step,
    prefactor,
    spring_forces,
)
from .model import (
    ChargeSet,
    ConfigError,
    DivergenceError,
    ExternalForcing,
    MassModel,
    SimParams,
    SimState,
    SpringTopology,
    net_external_force,
)

log = logging.getLogger(__name__)

ForceBackend = Callable[[np.ndarray, ChargeSet], np.ndarray]
ChargeSchedule = Callable[[float], ChargeSet]

INTEGRATORS = ("imex", "verlet", "explicit")


def make_force_backend(name: str, params: SimParams) -> ForceBackend:
    if name == "brute":
        return BruteForceBackend(params.softening_epsilon)
    if name == "ddef":
        return DdefForceBackend(params)
    raise ConfigError(f"unknown force backend '{name}'")


@dataclass(frozen=True)
class EnergyBreakdown:
    """System energy split into its contributions, in Joules."""

    kinetic: float
    elastic: float
    coulomb: float
    external_potential: float
    total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "total", self.kinetic + self.elastic + self.coulomb + self.external_potential
        )


def total_energy(
    state: SimState,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    gravity: np.ndarray = (0.0, 0.0, 0.0),
    softening_epsilon: float = 1e-6,
) -> EnergyBreakdown:
    """Kinetic + spring + Coulomb energy plus the potential of constant forces and gravity."""
    mdiag = masses.diagonal()
    kinetic = 0.5 * float(state.velocities @ (mdiag * state.velocities))
    spring = elastic_energy(state.positions, topology)
    pair = coulomb.coulomb_energy(state.points(), charges, softening_epsilon)
    external = 0.0
    if forcing.constant_force is not None:
        external -= float(forcing.constant_force @ state.positions)
    g = np.asarray(gravity, dtype=float)
    if np.any(g != 0.0):
        external -= float(np.sum(masses.masses[:, None] * state.points() * g[None, :]))
    return EnergyBreakdown(kinetic=kinetic, elastic=spring, coulomb=pair, external_potential=external)


@dataclass
class Trajectory:
    """Time-ordered recorded states of one rollout."""

    states: list[SimState]
    params: SimParams
    integrator: str
    record_every: int = 1
    diverged_at: Optional[int] = None  # step index of the first non-finite state, if any

    @property
    def times(self) -> np.ndarray:
        return np.array([s.time for s in self.states])

    @property
    def vertex_count(self) -> int:
        return self.states[0].vertex_count

    def positions_matrix(self) -> np.ndarray:
        return np.stack([s.positions for s in self.states])


def imex_step(
    state: SimState,
    operators: ElasticOperators,
    prefac: PrefactoredSystem,
    charges: ChargeSet,
    forcing: ExternalForcing,
    params: SimParams,
    force_backend: Optional[ForceBackend] = None,
) -> SimState:
    """One implicit-spring / explicit-Coulomb step.

    The Coulomb force and external forces are evaluated once at the current
    positions and held fixed while the spring directions and the linear solve
    alternate.
    """
    h = params.h
    if prefac.h != h:
        raise ConfigError("prefactored system was built for a different timestep")
    if prefac.topology is not operators.topology:
        raise ConfigError("prefactored system was built for a different topology")
    topology = operators.topology
    mdiag = prefac.mass_diagonal
    masses = MassModel(mdiag[::3])

    x_t = state.positions
    y = 2.0 * x_t - state.prev_positions
    if force_backend is None:
        force_backend = BruteForceBackend(params.softening_epsilon)
    q_t = np.asarray(force_backend(state.points(), charges)).reshape(-1)
    f_ext = net_external_force(state, forcing, charges, masses, params.gravity, params.softening_epsilon)
    b_const = mdiag * y + (h * h) * (q_t + f_ext)

    pinned_values = prefac.pinned_dof_values(x_t) if prefac.pinned_vertices.size else None
    x = x_t
    for _ in range(params.local_global_iterations):
        d = local_step(x, topology, params.softening_epsilon)
        rhs = b_const + (h * h) * (operators.assembly @ d)
        x_new = prefac.solve(rhs, pinned_values)
        change = float(np.max(np.abs(x_new - x)))
        x = x_new
        if params.local_global_tol > 0.0 and change <= params.local_global_tol * max(
            1.0, float(np.max(np.abs(x_new)))
        ):
            break
    if not np.all(np.isfinite(x)):
        raise DivergenceError("implicit step produced non-finite positions")
    v = (x - x_t) / h
    return SimState(x, v, x_t, state.time + h)


def _explicit_total_force(
    state: SimState,
    topology: SpringTopology,
    charges: ChargeSet,
    forcing: ExternalForcing,
    masses: MassModel,
    params: SimParams,
    force_backend: Optional[ForceBackend],
) -> np.ndarray:
    if force_backend is None:
        force_backend = BruteForceBackend(params.softening_epsilon)
    f = spring_forces(state.positions, topology, params.softening_epsilon)
    f += np.asarray(force_backend(state.points(), charges)).reshape(-1)
    f += net_external_force(state, forcing, charges, masses, params.gravity, params.softening_epsilon)
    return f


def _pinned_dof_mask(n: int, pinned: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if pinned is None or len(pinned) == 0:
        return None
    mask = np.zeros(3 * n, dtype=bool)
    dofs = (3 * np.asarray(pinned, dtype=int)[:, None] + np.arange(3)[None, :]).ravel()
    mask[dofs] = True
    return mask


def verlet_step(
    state: SimState,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    params: SimParams,
    force_backend: Optional[ForceBackend] = None,
    pinned: Optional[np.ndarray] = None,
) -> SimState:
    """Position-Verlet over the exact forces; velocities by central difference."""
    h = params.h
    f = _explicit_total_force(state, topology, charges, forcing, masses, params, force_backend)
    x_new = 2.0 * state.positions - state.prev_positions + (h * h) * f / masses.diagonal()
    mask = _pinned_dof_mask(state.vertex_count, pinned)
    if mask is not None:
        x_new[mask] = state.positions[mask]
    if not np.all(np.isfinite(x_new)):
        raise DivergenceError("explicit step produced non-finite positions")
    v_new = (x_new - state.prev_positions) / (2.0 * h)
    return SimState(x_new, v_new, state.positions, state.time + h)


def explicit_euler_step(
    state: SimState,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    params: SimParams,
    force_backend: Optional[ForceBackend] = None,
    pinned: Optional[np.ndarray] = None,
) -> SimState:
    """Forward Euler on both potentials. Kept only as the unstable baseline."""
    h = params.h
    f = _explicit_total_force(state, topology, charges, forcing, masses, params, force_backend)
    x_new = state.positions + h * state.velocities
    v_new = state.velocities + h * f / masses.diagonal()
    mask = _pinned_dof_mask(state.vertex_count, pinned)
    if mask is not None:
        x_new[mask] = state.positions[mask]
        v_new[mask] = 0.0
    if not np.all(np.isfinite(x_new)) or not np.all(np.isfinite(v_new)):
        raise DivergenceError("explicit step produced non-finite state")
    return SimState(x_new, v_new, state.positions, state.time + h)


def rollout(
    state: SimState,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    params: SimParams,
    *,
    steps: int,
    integrator: str = "imex",
    forces: Optional[str] = None,
    record_every: int = 1,
    charge_schedule: Optional[ChargeSchedule] = None,
    pinned: Optional[np.ndarray] = None,
    raise_on_divergence: bool = True,
) -> Trajectory:
    """Apply the chosen stepper repeatedly, recording every `record_every`-th frame.

    `charge_schedule`, when given, replaces the charge set before each step
    based on the current simulation time. On divergence the partial trajectory
    is attached to the raised error, or returned directly with `diverged_at`
    set when `raise_on_divergence` is false.
    """
    if integrator not in INTEGRATORS:
        raise ConfigError(f"unknown integrator '{integrator}'")
    if steps < 0:
        raise ConfigError("steps must be >= 0")
    if record_every < 1:
        raise ConfigError("record_every must be >= 1")
    if forces is None:
        forces = "ddef" if params.ddef_enabled else "brute"
    backend = forces if callable(forces) else make_force_backend(forces, params)

    operators = prefac = None
    if integrator == "imex":
        operators = assemble_operators(topology)
        prefac = prefactor(masses, operators, params.h, pinned)

    traj = Trajectory(states=[state], params=params, integrator=integrator, record_every=record_every)
    current = state
    for step_index in range(steps):
        if charge_schedule is not None:
            charges = charge_schedule(current.time)
        try:
            if integrator == "imex":
                current = imex_step(current, operators, prefac, charges, forcing, params, backend)
            elif integrator == "verlet":
                current = verlet_step(current, topology, masses, charges, forcing, params, backend, pinned)
            else:
                current = explicit_euler_step(current, topology, masses, charges, forcing, params, backend, pinned)
        except DivergenceError as exc:
            traj.diverged_at = step_index
            if raise_on_divergence:
                raise DivergenceError(
                    f"integrator '{integrator}' diverged at step {step_index}",
                    step_index=step_index,
                    trajectory=traj,
                ) from exc
            log.warning("rollout diverged at step %d; returning partial trajectory", step_index)
            return traj
        if (step_index + 1) % record_every == 0:
            traj.states.append(current)
    return traj


def energy_series(
    traj: Trajectory,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    gravity: np.ndarray = (0.0, 0.0, 0.0),
    softening_epsilon: float = 1e-6,
) -> tuple[np.ndarray, list[EnergyBreakdown]]:
    """Per-recorded-frame energy breakdowns of a trajectory."""
    breakdowns = [
        total_energy(s, topology, masses, charges, forcing, gravity, softening_epsilon)
        for s in traj.states
    ]
    return traj.times, breakdowns


def relative_energy_error(
    traj: Trajectory,
    ref_traj: Trajectory,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    gravity: np.ndarray = (0.0, 0.0, 0.0),
    softening_epsilon: float = 1e-6,
) -> tuple[np.ndarray, np.ndarray]:
    """Total-energy error series against a reference sampled at a superset of times.

    Frames are compared at shared timestamps only. The denominator is floored
    at 1e-12 of the reference's initial energy magnitude.
    """
    if traj.vertex_count != ref_traj.vertex_count:
        raise ConfigError("trajectories describe different scenes")
    ref_times = ref_traj.times
    times = traj.times
    order = np.searchsorted(ref_times, times)
    order = np.clip(order, 0, ref_times.size - 1)
    # searchsorted returns the right neighbor for inexact hits; check both sides
    left = np.clip(order - 1, 0, ref_times.size - 1)
    pick = np.where(
        np.abs(ref_times[left] - times) < np.abs(ref_times[order] - times), left, order
    )
    tol = 1e-9 * np.maximum(1.0, np.abs(times))
    shared = np.abs(ref_times[pick] - times) <= tol
    if not np.any(shared):
        raise ConfigError("trajectories share no timestamps")

    kwargs = dict(gravity=gravity, softening_epsilon=softening_epsilon)
    e_traj = np.array(
        [
            total_energy(traj.states[k], topology, masses, charges, forcing, **kwargs).total
            for k in np.flatnonzero(shared)
        ]
    )
    e_ref = np.array(
        [
            total_energy(ref_traj.states[pick[k]], topology, masses, charges, forcing, **kwargs).total
            for k in np.flatnonzero(shared)
        ]
    )
    floor = 1e-12 * abs(e_ref[0])
    err = np.abs(e_traj - e_ref) / np.maximum(np.abs(e_ref), max(floor, np.finfo(float).tiny))
    return times[shared], err
