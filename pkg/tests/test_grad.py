import numpy as np
import pytest

from qspring.elastic import assemble_operators, local_step, prefactor
from qspring.grad import (
    EstimateOptions,
    L2FrameLoss,
    ParamSelector,
    converged_params,
    estimate_parameters,
    loss_gradient,
    step_jacobians,
)
from qspring.integrators import imex_step, rollout
from qspring.model import (
    ChargeSet,
    ConfigError,
    ExternalForcing,
    MassModel,
    SimParams,
    SimState,
    SpringTopology,
)

from conftest import consistent_state, random_spring_system


def converged_forward(state, topo, masses, charges, forcing, params, x=None, v=None, ch=None):
    """Forward step as a plain function of (positions, velocities, charges)."""
    ops = assemble_operators(topo)
    pre = prefactor(masses, ops, params.h)
    xx = state.positions if x is None else x
    vv = state.velocities if v is None else v
    st = consistent_state(xx, vv, params.h)
    return imex_step(st, ops, pre, ch if ch is not None else charges, forcing, converged_params(params)).positions


class TestStepJacobians:
    def setup_system(self, rng, n=7):
        state, topo, masses, charges = random_spring_system(rng, n=n)
        state = consistent_state(state.positions, state.velocities, 0.05)
        forcing = ExternalForcing(constant_force=rng.normal(size=3 * n) * 0.1)
        params = SimParams(h=0.05, gravity=(0.0, 0.0, -1.0))
        return state, topo, masses, charges, forcing, params

    def test_position_block(self, rng):
        state, topo, masses, charges, forcing, params = self.setup_system(rng)
        jac = step_jacobians(state, topo, masses, charges, forcing, params, ParamSelector("charges"))
        x = state.positions
        eps = 1e-6
        fd = np.zeros_like(jac.d_phi_dX)
        for d in range(x.size):
            e = np.zeros_like(x)
            e[d] = eps
            fp = converged_forward(state, topo, masses, charges, forcing, params, x=x + e)
            fm = converged_forward(state, topo, masses, charges, forcing, params, x=x - e)
            fd[:, d] = (fp - fm) / (2 * eps)
        assert np.max(np.abs(fd - jac.d_phi_dX)) < 1e-5 * np.abs(fd).max()

    def test_velocity_block(self, rng):
        state, topo, masses, charges, forcing, params = self.setup_system(rng)
        jac = step_jacobians(state, topo, masses, charges, forcing, params, ParamSelector("charges"))
        v = state.velocities
        eps = 1e-6
        fd = np.zeros_like(jac.d_phi_dV)
        for d in range(v.size):
            e = np.zeros_like(v)
            e[d] = eps
            fp = converged_forward(state, topo, masses, charges, forcing, params, v=v + e)
            fm = converged_forward(state, topo, masses, charges, forcing, params, v=v - e)
            fd[:, d] = (fp - fm) / (2 * eps)
        assert np.max(np.abs(fd - jac.d_phi_dV)) < 1e-5 * np.abs(fd).max()

    def test_charge_block(self, rng):
        state, topo, masses, charges, forcing, params = self.setup_system(rng)
        jac = step_jacobians(state, topo, masses, charges, forcing, params,
                             ParamSelector("charges", tied=False))
        n = charges.vertex_count
        eps = 1e-9
        fd = np.zeros((3 * n, n))
        for d in range(n):
            e = np.zeros(n)
            e[d] = eps
            fp = converged_forward(state, topo, masses, charges, forcing, params,
                                   ch=charges.with_charges(charges.charges + e))
            fm = converged_forward(state, topo, masses, charges, forcing, params,
                                   ch=charges.with_charges(charges.charges - e))
            fd[:, d] = (fp - fm) / (2 * eps)
        assert np.max(np.abs(fd - jac.d_phi_d_theta)) < 1e-5 * np.abs(fd).max()

    def test_spring_block(self, rng):
        state, topo, masses, charges, forcing, params = self.setup_system(rng)
        jac = step_jacobians(state, topo, masses, charges, forcing, params,
                             ParamSelector("spring_constants", tied=False))
        s = topo.spring_count
        eps = 1e-6
        fd = np.zeros((state.positions.size, s))
        for d in range(s):
            e = np.zeros(s)
            e[d] = eps
            fp = converged_forward(state, topo.with_stiffness(topo.stiffness + e), masses,
                                   charges, forcing, params)
            fm = converged_forward(state, topo.with_stiffness(topo.stiffness - e), masses,
                                   charges, forcing, params)
            fd[:, d] = (fp - fm) / (2 * eps)
        assert np.max(np.abs(fd - jac.d_phi_d_theta)) < 1e-4 * np.abs(fd).max()

    def test_hessian_block(self, rng):
        # H is the Jacobian of the step residual at the converged output
        state, topo, masses, charges, forcing, params = self.setup_system(rng)
        jac = step_jacobians(state, topo, masses, charges, forcing, params, ParamSelector("charges"))
        h = params.h
        from qspring.coulomb import pairwise_forces_brute
        from qspring.model import net_external_force

        ops = assemble_operators(topo)
        mdiag = masses.diagonal()
        y = state.positions + h * state.velocities
        q_t = pairwise_forces_brute(state.points(), charges).reshape(-1)
        f_ext = net_external_force(state, forcing, charges, masses, params.gravity)

        def residual(x):
            d = local_step(x, topo)
            return (mdiag * x + h * h * (ops.laplacian @ x)
                    - mdiag * y - h * h * (ops.assembly @ d + q_t + f_ext))

        x_star = jac.x_next
        eps = 1e-6
        fd = np.zeros((x_star.size, x_star.size))
        for d in range(x_star.size):
            e = np.zeros_like(x_star)
            e[d] = eps
            fd[:, d] = (residual(x_star + e) - residual(x_star - e)) / (2 * eps)
        dense = jac.hessian.toarray()
        assert np.max(np.abs(fd - dense)) < 1e-5 * np.abs(dense).max()

    def test_small_h_limits(self, rng):
        state, topo, masses, charges, forcing, _ = self.setup_system(rng)
        params = SimParams(h=1e-6)
        jac = step_jacobians(state, topo, masses, charges, forcing, params, ParamSelector("charges"))
        n3 = state.positions.size
        assert np.max(np.abs(jac.d_phi_dX - np.eye(n3))) < 1e-6
        assert np.max(np.abs(jac.d_phi_dV)) < 1e-5

    def test_pinned_rows_zero(self, rng):
        state, topo, masses, charges, forcing, params = self.setup_system(rng)
        pinned = np.array([1])
        jac = step_jacobians(state, topo, masses, charges, forcing, params,
                             ParamSelector("charges"), pinned=pinned)
        assert np.all(jac.d_phi_dX[3:6] == 0.0)
        assert np.all(jac.d_phi_d_theta[3:6] == 0.0)


class TestLossGradient:
    def test_initial_frame_loss_has_zero_gradient(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=5)
        params = converged_params(SimParams(h=0.05))
        traj = rollout(state, topo, masses, charges, ExternalForcing.none(), params, steps=3)
        loss = L2FrameLoss({0: state.positions + 0.1})
        value, grad = loss_gradient(traj, loss, ParamSelector("charges"), topo, masses,
                                    charges, ExternalForcing.none(), params)
        assert value > 0.0
        assert np.all(grad == 0.0)

    def test_two_step_gradient_matches_fd(self, rng):
        n = 5
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        q0 = 2e-6
        charges = ChargeSet.uniform(n, q0)
        params = converged_params(SimParams(h=0.05))
        forcing = ExternalForcing.none()
        traj = rollout(state, topo, masses, charges, forcing, params, steps=2)
        loss = L2FrameLoss.last_frame(traj.states[-1].positions + 0.05, 2)
        sel = ParamSelector("charges", tied=True)
        value, grad = loss_gradient(traj, loss, sel, topo, masses, charges, forcing, params)

        def scripted(qv):
            tr = rollout(state, topo, masses, ChargeSet.uniform(n, qv), forcing, params, steps=2)
            return loss.value(tr)

        eps = 1e-10
        fd = (scripted(q0 + eps) - scripted(q0 - eps)) / (2 * eps)
        assert grad[0] == pytest.approx(fd, rel=1e-4)

    def test_multi_frame_weighted_loss(self, rng):
        n = 5
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        k0 = 4.0
        topo = topo.with_stiffness(np.full(topo.spring_count, k0))
        charges = ChargeSet.uniform(n, 1e-6)
        params = converged_params(SimParams(h=0.04))
        forcing = ExternalForcing.none()
        traj = rollout(state, topo, masses, charges, forcing, params, steps=3)
        loss = L2FrameLoss(
            {1: traj.states[1].positions + 0.02, 3: traj.states[3].positions - 0.01},
            weights={1: 0.5, 3: 2.0},
        )
        sel = ParamSelector("spring_constants", tied=True)
        value, grad = loss_gradient(traj, loss, sel, topo, masses, charges, forcing, params)

        def scripted(kv):
            t = topo.with_stiffness(np.full(topo.spring_count, kv))
            tr = rollout(state, t, masses, charges, forcing, params, steps=3)
            return loss.value(tr)

        eps = 1e-6
        fd = (scripted(k0 + eps) - scripted(k0 - eps)) / (2 * eps)
        assert grad[0] == pytest.approx(fd, rel=1e-4)

    def test_verlet_gradient_matches_fd(self, rng):
        n = 5
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        q0 = 2e-6
        charges = ChargeSet.uniform(n, q0)
        params = SimParams(h=0.02)
        forcing = ExternalForcing.none()
        traj = rollout(state, topo, masses, charges, forcing, params, steps=4, integrator="verlet")
        loss = L2FrameLoss.last_frame(traj.states[-1].positions + 0.05, 4)
        sel = ParamSelector("charges", tied=True)
        value, grad = loss_gradient(traj, loss, sel, topo, masses, charges, forcing, params)

        def scripted(qv):
            tr = rollout(state, topo, masses, ChargeSet.uniform(n, qv), forcing, params,
                         steps=4, integrator="verlet")
            return loss.value(tr)

        eps = 1e-10
        fd = (scripted(q0 + eps) - scripted(q0 - eps)) / (2 * eps)
        assert grad[0] == pytest.approx(fd, rel=1e-4)

    def test_unrecorded_frames_rejected(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=4)
        params = SimParams(h=0.05)
        traj = rollout(state, topo, masses, charges, ExternalForcing.none(), params, steps=3)
        loss = L2FrameLoss.last_frame(np.zeros(12), 7)
        with pytest.raises(ConfigError):
            loss_gradient(traj, loss, ParamSelector("charges"), topo, masses, charges,
                          ExternalForcing.none(), params)
        sparse_traj = rollout(state, topo, masses, charges, ExternalForcing.none(), params,
                              steps=4, record_every=2)
        with pytest.raises(ConfigError):
            loss_gradient(sparse_traj, L2FrameLoss.last_frame(np.zeros(12), 2),
                          ParamSelector("charges"), topo, masses, charges,
                          ExternalForcing.none(), params)

    def test_solver_route_invariance(self, rng):
        # factored sparse solves and dense solves agree to near machine precision
        n = 5
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        charges = ChargeSet.uniform(n, 2e-6)
        params = converged_params(SimParams(h=0.05))
        forcing = ExternalForcing.none()
        traj = rollout(state, topo, masses, charges, forcing, params, steps=2)
        loss = L2FrameLoss.last_frame(traj.states[-1].positions + 0.05, 2)
        sel = ParamSelector("charges", tied=True)
        _, grad_sparse = loss_gradient(traj, loss, sel, topo, masses, charges, forcing, params)

        import qspring.grad as grad_mod

        original = grad_mod._HessianSolver

        class DenseSolver(original):
            def __init__(self, hessian, free):
                self.free = free
                self.dense = hessian.toarray()

            def solve(self, rhs):
                return np.linalg.solve(self.dense, rhs)

        grad_mod._HessianSolver = DenseSolver
        try:
            _, grad_dense = loss_gradient(traj, loss, sel, topo, masses, charges, forcing, params)
        finally:
            grad_mod._HessianSolver = original
        assert np.abs(grad_dense - grad_sparse).max() <= 1e-10 * max(np.abs(grad_sparse).max(), 1e-30)

    def test_simplified_hessian_still_descends(self, rng):
        # with the direction term switched off, a few GD steps still reduce the loss
        n = 6
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        charges = ChargeSet.uniform(n, 3e-6)
        params = converged_params(SimParams(h=0.05))
        forcing = ExternalForcing.none()
        target_traj = rollout(state, topo, masses, ChargeSet.uniform(n, 4e-6), forcing, params, steps=5)
        target = target_traj.states[-1].positions
        loss = L2FrameLoss.last_frame(target, 5)
        sel = ParamSelector("charges", tied=True)
        q = 3e-6
        losses = []
        for _ in range(10):
            ch = ChargeSet.uniform(n, q)
            traj = rollout(state, topo, masses, ch, forcing, params, steps=5)
            value, grad = loss_gradient(traj, loss, sel, topo, masses, ch, forcing, params,
                                        include_direction_term=False)
            losses.append(value)
            q = q - 2e-7 * grad[0] / (abs(grad[0]) + 1e-30) * 1e-6 / 2
        assert all(b < a for a, b in zip(losses, losses[1:]))


class TestEstimation:
    def test_exact_guess_converges_immediately(self, rng):
        n = 5
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        charges = ChargeSet.uniform(n, 2e-6)
        params = SimParams(h=0.05)
        forcing = ExternalForcing.none()
        target = rollout(state, topo, masses, charges, forcing, converged_params(params),
                         steps=4).states[-1].positions
        options = EstimateOptions(steps=4, loss_tol=1e-18, max_iterations=50)
        result = estimate_parameters(state, topo, masses, charges, forcing, params,
                                     target, ParamSelector("charges", tied=True), options)
        assert result.iterations == 0
        assert result.loss <= 1e-18

    def test_recovers_perturbed_charge(self, rng):
        n = 6
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        true_q = 3e-6
        params = SimParams(h=0.05)
        forcing = ExternalForcing.none()
        target = rollout(state, topo, masses, ChargeSet.uniform(n, true_q), forcing,
                         converged_params(params), steps=6).states[-1].positions
        guess = ChargeSet.uniform(n, 1.5e-6)
        options = EstimateOptions(steps=6, max_iterations=60, step_size=0.3)
        result = estimate_parameters(state, topo, masses, guess, forcing, params, target,
                                     ParamSelector("charges", tied=True), options)
        assert abs(result.theta[0] - true_q) / true_q < 0.02

    def test_report_text_structure(self, rng):
        n = 4
        state, topo, masses, _ = random_spring_system(rng, n=n, charge_scale=0.0)
        charges = ChargeSet.uniform(n, 2e-6)
        params = SimParams(h=0.05)
        forcing = ExternalForcing.none()
        target = rollout(state, topo, masses, charges, forcing, converged_params(params),
                         steps=2).states[-1].positions
        options = EstimateOptions(steps=2, loss_tol=1e-18, max_iterations=3)
        result = estimate_parameters(state, topo, masses, charges, forcing, params, target,
                                     ParamSelector("charges", tied=True), options)
        text = result.report_text()
        assert "wall_time" in text and "loss" in text and "theta" in text
