"""Analytic differentiation of the steppers and gradient-based parameter estimation.

The implicit step, run to convergence, satisfies
    (M + h^2 L) X+ = M (X + h V) + h^2 (J D(X+) + Q(X) + F_ext(X))
so its derivatives follow from the implicit function theorem with
    H = M + h^2 (L - J dD/dX)
applied through linear solves, never an explicit inverse. The derivative of
the spring-parameter term is h^2 (dJ/dk D - dL/dk X+); every block here is
validated against central finite differences of the actual forward step.

Coulomb derivatives always go through the exact pairwise path: the
grid-approximated field is forward-only.
"""
from __future__ import annotations

import time as _time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import coulomb
from .elastic import assemble_operators, directions_jacobian, local_step, prefactor
from .integrators import Trajectory, imex_step, rollout
from .model import (
    ChargeSet,
    ConfigError,
    DivergenceError,
    ExternalForcing,
    MassModel,
    SimParams,
    SimState,
    SpringTopology,
)

_CONVERGED_ITERATIONS = 400
_CONVERGED_TOL = 1e-14


@dataclass(frozen=True)
class ParamSelector:
    """Which parameters are free: charges or spring constants, tied or per-entity."""

    kind: str                                # "charges" | "spring_constants"
    indices: Optional[np.ndarray] = None     # entity indices; None selects all
    tied: bool = True                        # one shared value across the selection

    def __post_init__(self):
        if self.kind not in ("charges", "spring_constants"):
            raise ConfigError(f"unknown parameter kind '{self.kind}'")
        if self.indices is not None:
            idx = np.asarray(self.indices, dtype=int).reshape(-1)
            idx.setflags(write=False)
            object.__setattr__(self, "indices", idx)

    def resolve_indices(self, topology: SpringTopology, charges: ChargeSet) -> np.ndarray:
        count = charges.vertex_count if self.kind == "charges" else topology.spring_count
        if self.indices is None:
            return np.arange(count)
        if self.indices.size and (self.indices.min() < 0 or self.indices.max() >= count):
            raise ConfigError("selector index out of range for this scene")
        return self.indices

    def size(self, topology: SpringTopology, charges: ChargeSet) -> int:
        return 1 if self.tied else self.resolve_indices(topology, charges).size

    def get_values(self, topology: SpringTopology, charges: ChargeSet) -> np.ndarray:
        idx = self.resolve_indices(topology, charges)
        source = charges.charges if self.kind == "charges" else topology.stiffness
        values = source[idx]
        if self.tied:
            return np.array([values[0] if values.size else 0.0])
        return values.copy()

    def apply(
        self, theta: np.ndarray, topology: SpringTopology, charges: ChargeSet
    ) -> tuple[SpringTopology, ChargeSet]:
        theta = np.asarray(theta, dtype=float).reshape(-1)
        idx = self.resolve_indices(topology, charges)
        if self.kind == "charges":
            q = charges.charges.copy()
            q[idx] = theta[0] if self.tied else theta
            return topology, charges.with_charges(q)
        k = topology.stiffness.copy()
        k[idx] = theta[0] if self.tied else theta
        return topology.with_stiffness(k), charges


@dataclass
class StepJacobians:
    """Derivative blocks of one converged implicit-explicit step."""

    d_phi_d_theta: np.ndarray     # (3n, p)
    d_phi_dX: np.ndarray          # (3n, 3n)
    d_phi_dV: np.ndarray          # (3n, 3n)
    hessian: sp.csc_matrix        # (3n, 3n) potential-energy Hessian H
    x_next: np.ndarray            # (3n,) converged step output


def converged_params(params: SimParams) -> SimParams:
    """Params that iterate the local/global alternation to a fixed point."""
    return params.replace(
        local_global_iterations=max(params.local_global_iterations, _CONVERGED_ITERATIONS),
        local_global_tol=_CONVERGED_TOL,
    )


def _explicit_force_jacobians(
    points: np.ndarray,
    charges: ChargeSet,
    forcing: ExternalForcing,
    softening_epsilon: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Position and charge derivatives of the explicitly integrated forces.

    Covers the pairwise Coulomb term, free external charges and the field's
    dependence on charge values. The field is treated as locally constant in
    position (no spatial derivative of user-supplied field functions).
    """
    dq_dx = coulomb.force_jacobian_positions(points, charges, softening_epsilon)
    dq_dx += coulomb.external_force_jacobian_positions(points, charges, forcing, softening_epsilon)
    dq_dq = coulomb.force_gradient_charges(points, charges, softening_epsilon)
    dq_dq += coulomb.external_force_gradient_charges(points, charges, forcing, softening_epsilon)
    return dq_dx, dq_dq


def _scatter_per_spring(
    topology: SpringTopology,
    contrib: np.ndarray,
    spring_indices: np.ndarray,
    tied: bool,
) -> np.ndarray:
    """Scatter per-spring 3-vectors to (3n, p): +contrib at endpoint i, -contrib at j."""
    n = topology.vertex_count
    sel = spring_indices
    p = 1 if tied else sel.size
    cols = np.zeros(sel.size, dtype=np.int64) if tied else np.arange(sel.size)
    rows_a = (3 * topology.i[sel][:, None] + np.arange(3)[None, :]).ravel()
    rows_b = (3 * topology.j[sel][:, None] + np.arange(3)[None, :]).ravel()
    col_rep = np.repeat(cols, 3)
    mat = sp.coo_matrix(
        (
            np.concatenate([contrib.ravel(), -contrib.ravel()]),
            (np.concatenate([rows_a, rows_b]), np.concatenate([col_rep, col_rep])),
        ),
        shape=(3 * n, p),
    )
    return np.asarray(mat.todense())


def _spring_rhs_derivative(
    topology: SpringTopology,
    x_next: np.ndarray,
    directions: np.ndarray,
    spring_indices: np.ndarray,
    tied: bool,
) -> np.ndarray:
    """(3n, p) derivative of h^-2 * rhs w.r.t. selected spring constants.

    Per spring with endpoints (a, b): +(d_s - (x_a - x_b)) at a and the
    negation at b, where d_s is the fitted rest-length direction.
    """
    pts = x_next.reshape(-1, 3)
    d = directions.reshape(-1, 3)
    sel = spring_indices
    contrib = d[sel] - (pts[topology.i[sel]] - pts[topology.j[sel]])
    return _scatter_per_spring(topology, contrib, sel, tied)


def _charge_rhs_columns(dq_dq: np.ndarray, charge_indices: np.ndarray, tied: bool) -> np.ndarray:
    cols = dq_dq[:, charge_indices]
    if tied:
        return cols.sum(axis=1, keepdims=True)
    return cols


class _HessianSolver:
    """Factor H once per step, restricted to free dofs."""

    def __init__(self, hessian: sp.spmatrix, free: Optional[np.ndarray]):
        self.free = free
        matrix = hessian.tocsc() if free is None else hessian.tocsc()[free][:, free].tocsc()
        self.lu = spla.splu(matrix)

    def solve(self, rhs: np.ndarray) -> np.ndarray:
        rhs = np.asarray(rhs)
        if self.free is None:
            return self.lu.solve(rhs)
        out = np.zeros_like(rhs)
        out[self.free] = self.lu.solve(rhs[self.free])
        return out


def _free_mask(n: int, pinned: Optional[np.ndarray]) -> Optional[np.ndarray]:
    if pinned is None or len(pinned) == 0:
        return None
    free = np.ones(3 * n, dtype=bool)
    dofs = (3 * np.asarray(pinned, dtype=int)[:, None] + np.arange(3)[None, :]).ravel()
    free[dofs] = False
    return free


def step_hessian(
    topology: SpringTopology,
    masses: MassModel,
    x_next: np.ndarray,
    h: float,
    include_direction_term: bool = True,
    softening_epsilon: float = 1e-6,
    operators=None,
) -> sp.csc_matrix:
    """H = M + h^2 (L - J dD/dX) at the step output; the potential-energy Hessian."""
    ops = operators if operators is not None else assemble_operators(topology)
    correction = 0
    if include_direction_term and topology.spring_count:
        correction = ops.assembly @ directions_jacobian(x_next, topology, softening_epsilon)
    return (sp.diags(masses.diagonal()) + (h * h) * (ops.laplacian - correction)).tocsc()


def step_jacobians(
    state: SimState,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    params: SimParams,
    selector: ParamSelector,
    pinned: Optional[np.ndarray] = None,
    include_direction_term: bool = True,
) -> StepJacobians:
    """Derivative blocks of the converged implicit step at one state.

    Pinned dofs have zero rows and columns: they neither move nor propagate
    sensitivities.
    """
    h = params.h
    run_params = converged_params(params)
    ops = assemble_operators(topology)
    prefac = prefactor(masses, ops, h, pinned)
    next_state = imex_step(state, ops, prefac, charges, forcing, run_params)
    x_next = next_state.positions

    hessian = step_hessian(topology, masses, x_next, h, include_direction_term, params.softening_epsilon)
    free = _free_mask(state.vertex_count, pinned)
    solver = _HessianSolver(hessian, free)

    mdiag = masses.diagonal()
    dq_dx, dq_dq = _explicit_force_jacobians(state.points(), charges, forcing, params.softening_epsilon)

    rhs_v = h * np.diag(mdiag)
    rhs_x = np.diag(mdiag) + (h * h) * dq_dx
    if free is not None:
        rhs_v[:, ~free] = 0.0
        rhs_x[:, ~free] = 0.0
    d_phi_dV = solver.solve(rhs_v)
    d_phi_dX = solver.solve(rhs_x)

    if selector.kind == "charges":
        rhs_theta = (h * h) * _charge_rhs_columns(
            dq_dq, selector.resolve_indices(topology, charges), selector.tied
        )
    else:
        directions = local_step(x_next, topology, params.softening_epsilon)
        rhs_theta = (h * h) * _spring_rhs_derivative(
            topology, x_next, directions, selector.resolve_indices(topology, charges), selector.tied
        )
    d_phi_d_theta = solver.solve(rhs_theta)

    return StepJacobians(
        d_phi_d_theta=d_phi_d_theta,
        d_phi_dX=d_phi_dX,
        d_phi_dV=d_phi_dV,
        hessian=hessian,
        x_next=x_next,
    )


@dataclass
class L2FrameLoss:
    """Frame-weighted squared position error: sum_f w_f |x_f - target_f|^2 / n."""

    targets: dict[int, np.ndarray]
    weights: Optional[dict[int, float]] = None

    @staticmethod
    def last_frame(target_positions: np.ndarray, frame: int) -> "L2FrameLoss":
        return L2FrameLoss({frame: np.asarray(target_positions, dtype=float).reshape(-1)})

    def frames(self) -> list[int]:
        return sorted(self.targets)

    def _weight(self, frame: int) -> float:
        return 1.0 if self.weights is None else float(self.weights.get(frame, 1.0))

    def value(self, traj: Trajectory) -> float:
        total = 0.0
        for frame, target in self.targets.items():
            x = traj.states[frame].positions
            n = x.size // 3
            total += self._weight(frame) * float(np.sum((x - target) ** 2)) / n
        return total

    def frame_gradient(self, frame: int, positions: np.ndarray) -> np.ndarray:
        target = self.targets[frame]
        n = positions.size // 3
        return 2.0 * self._weight(frame) * (positions - target) / n


def loss_gradient(
    traj: Trajectory,
    loss: L2FrameLoss,
    selector: ParamSelector,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    params: SimParams,
    pinned: Optional[np.ndarray] = None,
    include_direction_term: bool = True,
) -> tuple[float, np.ndarray]:
    """Loss value and dLoss/dtheta along a fully recorded trajectory.

    Sensitivities of every frame are accumulated forward through the chain
    rule; each step needs one factorization of H (implicit) or only matrix
    products (explicit steppers).
    """
    if traj.record_every != 1:
        raise ConfigError("gradients need a trajectory recorded at every step")
    last_needed = max(loss.frames())
    if last_needed >= len(traj.states):
        raise ConfigError(f"loss references frame {last_needed}, but only {len(traj.states)} are recorded")

    h = params.h
    n = traj.vertex_count
    p = selector.size(topology, charges)
    mdiag = masses.diagonal()
    free = _free_mask(n, pinned)
    charge_idx = selector.resolve_indices(topology, charges) if selector.kind == "charges" else None
    spring_idx = selector.resolve_indices(topology, charges) if selector.kind == "spring_constants" else None

    s_x = np.zeros((3 * n, p))
    s_v = np.zeros((3 * n, p))
    s_prev = np.zeros((3 * n, p))  # d(prev_positions)/dtheta, used by the Verlet recursion

    grad = np.zeros(p)
    value = loss.value(traj)
    frames = set(loss.frames())
    ops = assemble_operators(topology)
    eps = params.softening_epsilon

    def explicit_jacobian_product(points, sens):
        """(d(explicit forces)/dX) @ sens, column by column, never densified."""
        out = np.empty_like(sens)
        for c in range(sens.shape[1]):
            col = coulomb.force_jacobian_vector_product(points, charges, sens[:, c], eps)
            col += coulomb.external_force_jacobian_vector_product(points, charges, forcing, sens[:, c], eps)
            out[:, c] = col
        return out

    def theta_force_columns(points):
        if selector.kind != "charges":
            return None
        if selector.tied:
            return coulomb.force_gradient_charges_tied(points, charges, forcing, charge_idx, eps)[:, None]
        dq_dq = coulomb.force_gradient_charges(points, charges, eps)
        dq_dq += coulomb.external_force_gradient_charges(points, charges, forcing, eps)
        return dq_dq[:, charge_idx]

    for step in range(last_needed):
        state = traj.states[step]
        x_next = traj.states[step + 1].positions
        points = state.points()
        rhs_theta = theta_force_columns(points)

        if traj.integrator == "imex":
            hessian = step_hessian(
                topology, masses, x_next, h, include_direction_term,
                params.softening_epsilon, operators=ops,
            )
            solver = _HessianSolver(hessian, free)
            if rhs_theta is None:
                directions = local_step(x_next, topology, params.softening_epsilon)
                rhs_theta = _spring_rhs_derivative(topology, x_next, directions, spring_idx, selector.tied)
            rhs = mdiag[:, None] * (s_x + h * s_v) + (h * h) * explicit_jacobian_product(points, s_x)
            rhs += (h * h) * rhs_theta
            s_x_next = solver.solve(rhs)
            s_v_next = (s_x_next - s_x) / h
            s_x, s_v = s_x_next, s_v_next
        elif traj.integrator == "verlet":
            if rhs_theta is None:
                rhs_theta = _verlet_spring_force_derivative(
                    topology, state.positions, spring_idx, selector.tied, params.softening_epsilon
                )
            df_dx = (h * h / mdiag)[:, None] * (
                (ops.assembly @ directions_jacobian(state.positions, topology, params.softening_epsilon)
                 - ops.laplacian) @ s_x
                + explicit_jacobian_product(points, s_x)
                + rhs_theta
            )
            s_next = 2.0 * s_x - s_prev + df_dx
            if free is not None:
                s_next[~free] = 0.0
            s_prev, s_x = s_x, s_next
        else:
            raise ConfigError(f"gradients are not defined for integrator '{traj.integrator}'")

        frame = step + 1
        if frame in frames:
            grad += loss.frame_gradient(frame, traj.states[frame].positions) @ s_x
    return value, grad


def _verlet_spring_force_derivative(
    topology: SpringTopology,
    positions: np.ndarray,
    spring_indices: np.ndarray,
    tied: bool,
    softening_epsilon: float,
) -> np.ndarray:
    """(3n, p) derivative of the exact spring force w.r.t. selected spring constants."""
    pts = positions.reshape(-1, 3)
    sel = spring_indices
    diff = pts[topology.i[sel]] - pts[topology.j[sel]]
    dist = np.maximum(np.linalg.norm(diff, axis=1), max(softening_epsilon, np.finfo(float).tiny))
    contrib = (-(dist - topology.rest_length[sel]) / dist)[:, None] * diff
    return _scatter_per_spring(topology, contrib, sel, tied)


@dataclass
class EstimateOptions:
    """Gradient-descent settings for parameter recovery."""

    steps: int                       # rollout length per evaluation
    integrator: str = "imex"
    forces: str = "brute"
    step_size: float = 0.25          # first move, as a fraction of the parameter scale
    max_iterations: int = 200
    loss_tol: float = 0.0            # stop when loss <= this (0 keeps going)
    grad_tol: float = 0.0            # stop on scaled gradient norm (0 keeps going)
    max_backtracks: int = 40
    include_direction_term: bool = True
    theta_min: Optional[float] = None
    theta_max: Optional[float] = None


@dataclass
class EstimationStep:
    iteration: int
    theta: np.ndarray
    loss: float
    grad_norm: float
    step_scale: float
    elapsed: float


@dataclass
class EstimationResult:
    theta: np.ndarray
    loss: float
    status: str                       # converged | stalled | max_iterations | diverged
    iterations: int
    history: list[EstimationStep]
    wall_time: float

    def report_text(self) -> str:
        lines = [
            "parameter estimation report",
            f"status: {self.status}   iterations: {self.iterations}   wall_time: {self.wall_time:.3f} s",
            f"final theta: {np.array2string(self.theta, precision=8)}   final loss: {self.loss:.6e}",
            "",
            f"{'iter':>5} {'loss':>14} {'grad_norm':>14} {'step':>10}  theta",
        ]
        for rec in self.history:
            lines.append(
                f"{rec.iteration:>5} {rec.loss:>14.6e} {rec.grad_norm:>14.6e} "
                f"{rec.step_scale:>10.3e}  {np.array2string(rec.theta, precision=8)}"
            )
        return "\n".join(lines)


def estimate_parameters(
    state: SimState,
    topology: SpringTopology,
    masses: MassModel,
    charges: ChargeSet,
    forcing: ExternalForcing,
    params: SimParams,
    target_positions: np.ndarray,
    selector: ParamSelector,
    options: EstimateOptions,
    pinned: Optional[np.ndarray] = None,
) -> EstimationResult:
    """Recover selected parameters by matching the final frame of a rollout.

    Plain gradient descent with backtracking halving: every iteration starts
    from the base step size and halves until the loss decreases. Divergent
    forward rollouts count as infinite loss and shrink the step instead of
    crashing.
    """
    start = _time.perf_counter()
    loss = L2FrameLoss.last_frame(target_positions, options.steps)
    run_params = converged_params(params) if options.integrator == "imex" else params

    theta = selector.get_values(topology, charges).astype(float)
    scale = max(float(np.max(np.abs(theta))), np.finfo(float).tiny)

    def evaluate(th: np.ndarray, with_grad: bool):
        topo, ch = selector.apply(th, topology, charges)
        try:
            traj = rollout(
                state, topo, masses, ch, forcing, run_params,
                steps=options.steps, integrator=options.integrator,
                forces=options.forces, record_every=1, pinned=pinned,
            )
        except DivergenceError:
            return np.inf, None
        if not with_grad:
            return loss.value(traj), None
        value, grad = loss_gradient(
            traj, loss, selector, topo, masses, ch, forcing, run_params,
            pinned=pinned, include_direction_term=options.include_direction_term,
        )
        return value, grad

    history: list[EstimationStep] = []
    current_loss, grad = evaluate(theta, with_grad=True)
    if not np.isfinite(current_loss):
        return EstimationResult(theta, float("inf"), "diverged", 0, history, _time.perf_counter() - start)
    grad_norm = float(np.linalg.norm(grad))
    history.append(EstimationStep(0, theta.copy(), current_loss, grad_norm, 0.0, _time.perf_counter() - start))

    status = "max_iterations"
    iterations = 0
    for it in range(1, options.max_iterations + 1):
        if options.loss_tol > 0.0 and current_loss <= options.loss_tol:
            status = "converged"
            break
        if options.grad_tol > 0.0 and grad_norm * scale <= options.grad_tol:
            status = "converged"
            break
        if grad_norm == 0.0:
            status = "converged"
            break
        # fixed base step expressed in parameter units, then backtracking halving
        alpha = options.step_size * scale / grad_norm
        accepted = False
        for _ in range(options.max_backtracks):
            if alpha * grad_norm <= 1e-15 * scale:
                break  # the step underflows the parameter scale; no progress possible
            candidate = theta - alpha * grad
            if options.theta_min is not None:
                candidate = np.maximum(candidate, options.theta_min)
            if options.theta_max is not None:
                candidate = np.minimum(candidate, options.theta_max)
            trial_loss, _ = evaluate(candidate, with_grad=False)
            if np.isfinite(trial_loss) and trial_loss < current_loss:
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            status = "stalled"
            break
        theta = candidate
        current_loss, grad = evaluate(theta, with_grad=True)
        if grad is None or not np.isfinite(current_loss):
            status = "diverged"
            break
        grad_norm = float(np.linalg.norm(grad))
        iterations = it
        history.append(
            EstimationStep(it, theta.copy(), current_loss, grad_norm, alpha, _time.perf_counter() - start)
        )
    else:
        status = "max_iterations"

    if status == "max_iterations" and options.loss_tol > 0.0 and current_loss <= options.loss_tol:
        status = "converged"
    return EstimationResult(theta, float(current_loss), status, iterations, history, _time.perf_counter() - start)
