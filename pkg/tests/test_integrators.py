import numpy as np
import pytest

from qspring.elastic import assemble_operators, local_step, prefactor
from qspring.integrators import (
    explicit_euler_step,
    imex_step,
    relative_energy_error,
    rollout,
    total_energy,
    verlet_step,
)
from qspring.model import (
    ChargeSet,
    ConfigError,
    DivergenceError,
    ExternalForcing,
    MassModel,
    SimParams,
    SimState,
    SpringTopology,
)

from conftest import consistent_state, random_spring_system


def spring_only_step(state, operators, prefac, forcing, params, masses):
    """Reference implicit step with no Coulomb term at all."""
    from qspring.model import net_external_force

    h = params.h
    mdiag = prefac.mass_diagonal
    y = 2.0 * state.positions - state.prev_positions
    f_ext = net_external_force(
        state, forcing, ChargeSet(np.zeros(state.vertex_count)), masses,
        params.gravity, params.softening_epsilon,
    )
    x = state.positions
    for _ in range(params.local_global_iterations):
        d = local_step(x, operators.topology, params.softening_epsilon)
        x = prefac.solve(mdiag * y + h * h * (operators.assembly @ d + f_ext))
    return SimState(x, (x - state.positions) / h, state.positions, state.time + h)


class TestImexStep:
    def test_ballistic_continuation(self):
        topo = SpringTopology.from_springs([], 2)
        masses = MassModel.uniform(2)
        ops = assemble_operators(topo)
        params = SimParams(h=0.1)
        pre = prefactor(masses, ops, params.h)
        x = np.arange(6.0)
        prev = x - 0.3
        state = SimState(x, (x - prev) / 0.1, prev, 0.0)
        out = imex_step(state, ops, pre, ChargeSet(np.zeros(2)), ExternalForcing.none(), params)
        assert np.allclose(out.positions, 2 * x - prev, atol=1e-14)
        assert out.time == pytest.approx(0.1)

    def test_zero_charge_reduction_to_spring_only(self, rng):
        state, topo, masses, _ = random_spring_system(rng, n=12)
        params = SimParams(h=0.05, local_global_iterations=3)
        ops = assemble_operators(topo)
        pre = prefactor(masses, ops, params.h)
        forcing = ExternalForcing(constant_force=rng.normal(size=36) * 0.1)
        charges = ChargeSet(np.zeros(12))
        a = imex_step(state, ops, pre, charges, forcing, params)
        b = spring_only_step(state, ops, pre, forcing, params, masses)
        scale = np.abs(b.positions).max()
        assert np.max(np.abs(a.positions - b.positions)) <= 1e-12 * scale

    def test_divergence_detected(self):
        # a force backend returning non-finite values must surface as divergence
        topo = SpringTopology.from_springs([(0, 1, 1.0, 1.0)], 2)
        masses = MassModel.uniform(2)
        params = SimParams(h=0.1)
        ops = assemble_operators(topo)
        pre = prefactor(masses, ops, params.h)
        charges = ChargeSet(np.full(2, 1e-6))
        state = SimState.at_rest(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        bad_backend = lambda pts, ch: np.full_like(pts, np.inf)
        with pytest.raises(DivergenceError):
            imex_step(state, ops, pre, charges, ExternalForcing.none(), params, bad_backend)

    def test_h_mismatch_rejected(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=4)
        ops = assemble_operators(topo)
        pre = prefactor(masses, ops, 0.1)
        with pytest.raises(ConfigError):
            imex_step(state, ops, pre, charges, ExternalForcing.none(), SimParams(h=0.2))


class TestVerletStep:
    def test_ballistic_continuation(self):
        topo = SpringTopology.from_springs([], 2)
        masses = MassModel.uniform(2)
        params = SimParams(h=0.1)
        x = np.arange(6.0)
        prev = x - 0.3
        state = SimState(x, (x - prev) / 0.1, prev, 0.0)
        out = verlet_step(state, topo, masses, ChargeSet(np.zeros(2)), ExternalForcing.none(), params)
        assert np.allclose(out.positions, 2 * x - prev, atol=1e-14)

    def test_harmonic_oscillator_period(self):
        # two unit masses on a unit spring: analytic period 2 pi sqrt(m_eff / k)
        k, m = 4.0, 1.0
        topo = SpringTopology.from_springs([(0, 1, k, 1.0)], 2)
        masses = MassModel.uniform(2, m)
        omega = np.sqrt(2.0 * k / m)  # reduced mass m/2
        period = 2 * np.pi / omega
        h = period / 1000
        params = SimParams(h=h)
        x0 = np.array([[-0.55, 0.0, 0.0], [0.55, 0.0, 0.0]])  # stretched by 0.1
        state = SimState.at_rest(x0)
        traj = rollout(state, topo, masses, ChargeSet(np.zeros(2)), ExternalForcing.none(),
                       params, steps=1500, integrator="verlet")
        gap = np.array([np.linalg.norm(s.points()[1] - s.points()[0]) for s in traj.states])
        # find the first return to maximum stretch
        peaks = [i for i in range(1, len(gap) - 1) if gap[i] >= gap[i - 1] and gap[i] >= gap[i + 1]]
        measured = peaks[0] * h
        assert measured == pytest.approx(period, rel=0.01)

    def test_energy_drift_bounded(self, rng):
        # symplectic behavior over many steps at small h
        state, topo, masses, charges = random_spring_system(rng, n=6, charge_scale=5e-7)
        params = SimParams(h=1e-3)
        forcing = ExternalForcing.none()
        traj = rollout(consistent_state(state.positions, state.velocities * 0.1, params.h),
                       topo, masses, charges, forcing, params, steps=10_000,
                       integrator="verlet", record_every=1000)
        energies = [
            total_energy(s, topo, masses, charges, forcing).total for s in traj.states
        ]
        e0 = energies[0]
        assert max(abs(e - e0) for e in energies) / abs(e0) < 1e-2


class TestEnergies:
    def test_rest_state_only_external_potential(self):
        topo = SpringTopology.from_springs([(0, 1, 3.0, 1.0)], 2)
        masses = MassModel.uniform(2)
        state = SimState.at_rest(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        forcing = ExternalForcing(constant_force=np.array([0.0, 0.0, 1.0, 0.0, 0.0, 1.0]))
        e = total_energy(state, topo, masses, ChargeSet(np.zeros(2)), forcing)
        assert e.kinetic == 0.0 and e.elastic == 0.0 and e.coulomb == 0.0
        assert e.total == pytest.approx(e.external_potential)

    def test_unit_coulomb_pair_energy(self):
        topo = SpringTopology.from_springs([], 2)
        masses = MassModel.uniform(2)
        state = SimState.at_rest(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        charges = ChargeSet(np.array([1.0, 1.0]), coulomb_constant=7.5)
        e = total_energy(state, topo, masses, charges, ExternalForcing.none())
        assert e.coulomb == pytest.approx(7.5)

    def test_total_is_sum_of_parts(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=7)
        e = total_energy(state, topo, masses, charges, ExternalForcing.none())
        assert e.total == pytest.approx(e.kinetic + e.elastic + e.coulomb + e.external_potential, rel=1e-12)

    def test_conservation_along_fine_verlet(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=8, charge_scale=1e-6)
        params = SimParams(h=1e-3)
        forcing = ExternalForcing.none()
        traj = rollout(consistent_state(state.positions, state.velocities * 0.1, params.h),
                       topo, masses, charges, forcing, params, steps=15_000,
                       integrator="verlet", record_every=1500)
        energies = [total_energy(s, topo, masses, charges, forcing).total for s in traj.states]
        drift = max(abs(e - energies[0]) for e in energies) / abs(energies[0])
        assert drift < 0.01


class TestRelativeEnergyError:
    def test_identical_trajectories_zero(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=5)
        params = SimParams(h=0.02)
        forcing = ExternalForcing.none()
        traj = rollout(state, topo, masses, charges, forcing, params, steps=20)
        times, err = relative_energy_error(traj, traj, topo, masses, charges, forcing)
        assert times.size == 21
        assert np.all(err == 0.0)

    def test_subsampled_reference_alignment(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=5)
        forcing = ExternalForcing.none()
        coarse = rollout(state, topo, masses, charges, forcing, SimParams(h=0.03), steps=10)
        fine = rollout(state, topo, masses, charges, forcing, SimParams(h=0.01), steps=30)
        times, err = relative_energy_error(coarse, fine, topo, masses, charges, forcing)
        assert times.size == 11  # every coarse frame matches a fine frame
        assert np.all(np.isfinite(err))

    def test_incommensurate_steps_share_partial_frames(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=5)
        forcing = ExternalForcing.none()
        coarse = rollout(state, topo, masses, charges, forcing, SimParams(h=0.015), steps=10)
        fine = rollout(state, topo, masses, charges, forcing, SimParams(h=0.01), steps=15)
        times, err = relative_energy_error(coarse, fine, topo, masses, charges, forcing)
        # shared stamps are multiples of 0.03 only
        assert np.allclose(times / 0.03, np.round(times / 0.03))

    def test_mismatched_scenes_rejected(self, rng):
        s1, t1, m1, c1 = random_spring_system(rng, n=5)
        s2, t2, m2, c2 = random_spring_system(rng, n=6)
        forcing = ExternalForcing.none()
        tr1 = rollout(s1, t1, m1, c1, forcing, SimParams(h=0.05), steps=2)
        tr2 = rollout(s2, t2, m2, c2, forcing, SimParams(h=0.05), steps=2)
        with pytest.raises(ConfigError):
            relative_energy_error(tr1, tr2, t1, m1, c1, forcing)


class TestRollout:
    def test_zero_steps(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=4)
        traj = rollout(state, topo, masses, charges, ExternalForcing.none(), SimParams(h=0.1), steps=0)
        assert len(traj.states) == 1
        assert traj.states[0] is state

    def test_determinism(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=6)
        kwargs = dict(steps=20, integrator="imex")
        a = rollout(state, topo, masses, charges, ExternalForcing.none(), SimParams(h=0.05), **kwargs)
        b = rollout(state, topo, masses, charges, ExternalForcing.none(), SimParams(h=0.05), **kwargs)
        assert np.array_equal(a.positions_matrix(), b.positions_matrix())

    def test_record_every(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=4)
        traj = rollout(state, topo, masses, charges, ExternalForcing.none(),
                       SimParams(h=0.05), steps=10, record_every=5)
        assert len(traj.states) == 3
        assert traj.states[1].time == pytest.approx(0.25)

    @staticmethod
    def _failing_backend(fail_at_call):
        calls = {"n": 0}

        def backend(pts, ch):
            calls["n"] += 1
            if calls["n"] > fail_at_call:
                return np.full_like(pts, np.nan)
            return np.zeros_like(pts)

        return backend

    def test_divergence_carries_step_index(self):
        topo = SpringTopology.from_springs([(0, 1, 1.0, 1.0)], 2)
        masses = MassModel.uniform(2)
        charges = ChargeSet(np.full(2, 1e-6))
        state = SimState.at_rest(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        with pytest.raises(DivergenceError) as info:
            rollout(state, topo, masses, charges, ExternalForcing.none(), SimParams(h=0.1),
                    steps=10, forces=self._failing_backend(3))
        assert info.value.step_index == 3
        assert info.value.trajectory is not None
        assert len(info.value.trajectory.states) == 4

    def test_partial_trajectory_on_divergence(self):
        topo = SpringTopology.from_springs([(0, 1, 1.0, 1.0)], 2)
        masses = MassModel.uniform(2)
        charges = ChargeSet(np.full(2, 1e-6))
        state = SimState.at_rest(np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]))
        traj = rollout(state, topo, masses, charges, ExternalForcing.none(), SimParams(h=0.1),
                       steps=10, raise_on_divergence=False, forces=self._failing_backend(5))
        assert traj.diverged_at == 5
        assert len(traj.states) == 6

    def test_charge_schedule_applied(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=4, charge_scale=0.0)
        calls = []

        def schedule(t):
            calls.append(t)
            return ChargeSet(np.full(4, 1e-6))

        rollout(state, topo, masses, charges, ExternalForcing.none(), SimParams(h=0.1),
                steps=3, charge_schedule=schedule)
        assert calls == pytest.approx([0.0, 0.1, 0.2])

    def test_explicit_euler_runs(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=4)
        traj = rollout(state, topo, masses, charges, ExternalForcing.none(),
                       SimParams(h=0.001), steps=5, integrator="explicit")
        assert len(traj.states) == 6

    def test_small_h_agreement_between_integrators(self, rng):
        # the two steppers converge to each other as h shrinks
        state, topo, masses, charges = random_spring_system(rng, n=6, charge_scale=1e-6)
        state = SimState.at_rest(state.points())
        forcing = ExternalForcing.none()
        t_end = 1.0
        gaps = []
        for h in (1e-2, 5e-3, 2.5e-3):
            steps = int(round(t_end / h))
            a = rollout(state, topo, masses, charges, forcing, SimParams(h=h),
                        steps=steps, integrator="imex", record_every=steps)
            b = rollout(state, topo, masses, charges, forcing, SimParams(h=h),
                        steps=steps, integrator="verlet", record_every=steps)
            diff = a.states[-1].points() - b.states[-1].points()
            gaps.append(np.linalg.norm(diff, axis=1).max())
        assert gaps[0] > gaps[1] > gaps[2]

    def test_backend_equivalence_along_rollout(self):
        # per-step force discrepancy between the exact and grid-approximated
        # backends stays inside the field-approximation envelope
        from qspring.coulomb import pairwise_forces_brute
        from qspring.ddef import DdefForceBackend
        from qspring.meshgen import torus_mesh
        from qspring.scene import MeshSource, springs_from_mesh

        verts, edges = torus_mesh(major_radius=1.5, minor_radius=0.6)
        topo = springs_from_mesh(MeshSource(verts, edges), 10.0)
        masses = MassModel.uniform(len(verts))
        charges = ChargeSet.uniform(len(verts), 6e-6)
        params = SimParams(h=0.05, ddef_m=300)
        traj = rollout(SimState.at_rest(verts), topo, masses, charges,
                       ExternalForcing.none(), params, steps=5, integrator="imex")
        backend = DdefForceBackend(params)
        for state in traj.states:
            approx = backend(state.points(), charges)
            exact = pairwise_forces_brute(state.points(), charges)
            norms = np.linalg.norm(exact, axis=1)
            keep = norms > 0
            rel = np.linalg.norm(approx[keep] - exact[keep], axis=1) / norms[keep]
            assert rel.mean() < 0.1

    def test_pinned_vertices_hold(self, rng):
        state, topo, masses, charges = random_spring_system(rng, n=6)
        pinned = np.array([0, 3])
        for integrator in ("imex", "verlet", "explicit"):
            traj = rollout(state, topo, masses, charges, ExternalForcing.none(),
                           SimParams(h=0.01), steps=5, integrator=integrator, pinned=pinned)
            for s in traj.states:
                assert np.allclose(s.points()[pinned], state.points()[pinned], atol=1e-14)
