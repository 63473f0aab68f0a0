import numpy as np
import pytest

from qspring.coulomb import (
    coulomb_energy,
    external_force_gradient_charges,
    external_force_jacobian_positions,
    force_gradient_charges,
    force_jacobian_positions,
    pairwise_forces_brute,
)
from qspring.model import ChargeSet, ExternalForcing


def forces_loop(points, charges, softening=1e-6):
    """Index-ordered scalar double loop; the bit-stable oracle."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    n = pts.shape[0]
    out = np.zeros((n, 3))
    q = charges.charges
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            diff = pts[i] - pts[j]
            dist = max(float(np.linalg.norm(diff)), softening)
            out[i] += charges.coulomb_constant * q[i] * q[j] * diff / dist**3
    return out


class TestBruteForces:
    def test_unit_repulsive_pair(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        ch = ChargeSet(np.array([1.0, 1.0]), coulomb_constant=1.0)
        f = pairwise_forces_brute(pts, ch)
        assert np.allclose(f[0], [-1.0, 0.0, 0.0])
        assert np.allclose(f[1], [1.0, 0.0, 0.0])

    def test_zero_charges(self, rng):
        pts = rng.normal(size=(6, 3))
        f = pairwise_forces_brute(pts, ChargeSet(np.zeros(6)))
        assert np.all(f == 0.0)

    def test_symmetric_line_middle_vertex(self):
        pts = np.array([[-1.0, 0.0, 0.0], [0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        ch = ChargeSet(np.full(3, 2e-6))
        f = pairwise_forces_brute(pts, ch)
        assert np.allclose(f[1], 0.0)

    def test_matches_loop_oracle(self, rng):
        pts = rng.normal(size=(17, 3))
        ch = ChargeSet(rng.uniform(-3e-6, 3e-6, 17))
        fast = pairwise_forces_brute(pts, ch)
        slow = forces_loop(pts, ch)
        assert np.max(np.abs(fast - slow)) <= 1e-12 * np.abs(slow).max()

    def test_momentum_conservation(self, rng):
        pts = rng.normal(size=(30, 3))
        ch = ChargeSet(rng.uniform(-5e-6, 5e-6, 30))
        f = pairwise_forces_brute(pts, ch)
        assert np.abs(f.sum(axis=0)).max() < 1e-9 * np.abs(f).sum()

    def test_pair_antisymmetry(self, rng):
        pts = rng.normal(size=(2, 3))
        ch = ChargeSet(rng.uniform(-5e-6, 5e-6, 2))
        f = pairwise_forces_brute(pts, ch)
        assert np.allclose(f[0], -f[1], rtol=1e-12)

    def test_softening_keeps_coincident_pairs_finite(self):
        pts = np.zeros((2, 3))
        ch = ChargeSet(np.array([1e-6, 1e-6]))
        f = pairwise_forces_brute(pts, ch, softening_epsilon=1e-6)
        assert np.all(np.isfinite(f))


class TestEnergy:
    def test_unit_pair(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        ch = ChargeSet(np.array([1.0, 1.0]), coulomb_constant=1.0)
        assert coulomb_energy(pts, ch) == pytest.approx(1.0)

    def test_opposite_pair_negative(self):
        pts = np.array([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]])
        ch = ChargeSet(np.array([1e-6, -1e-6]))
        assert coulomb_energy(pts, ch) < 0.0

    def test_negative_gradient_is_force(self, rng):
        pts = rng.normal(size=(8, 3)) * 0.8
        ch = ChargeSet(rng.uniform(-4e-6, 4e-6, 8))
        forces = pairwise_forces_brute(pts, ch).reshape(-1)
        eps = 1e-7
        flat = pts.reshape(-1).copy()
        for d in rng.choice(flat.size, size=10, replace=False):
            e = np.zeros_like(flat)
            e[d] = eps
            fd = (coulomb_energy((flat + e).reshape(-1, 3), ch)
                  - coulomb_energy((flat - e).reshape(-1, 3), ch)) / (2 * eps)
            assert -fd == pytest.approx(forces[d], rel=1e-6, abs=1e-12)


class TestJacobians:
    def test_position_jacobian_matches_fd(self, rng):
        n = 10
        pts = rng.normal(size=(n, 3))
        ch = ChargeSet(rng.uniform(-4e-6, 4e-6, n))
        jac = force_jacobian_positions(pts, ch)
        flat = pts.reshape(-1)
        eps = 1e-7
        fd = np.zeros_like(jac)
        for d in range(flat.size):
            e = np.zeros_like(flat)
            e[d] = eps
            fp = pairwise_forces_brute((flat + e).reshape(-1, 3), ch).reshape(-1)
            fm = pairwise_forces_brute((flat - e).reshape(-1, 3), ch).reshape(-1)
            fd[:, d] = (fp - fm) / (2 * eps)
        assert np.max(np.abs(fd - jac)) < 1e-5 * np.abs(fd).max()

    def test_position_jacobian_symmetric_and_translation_invariant(self, rng):
        n = 8
        pts = rng.normal(size=(n, 3))
        ch = ChargeSet(rng.uniform(-4e-6, 4e-6, n))
        jac = force_jacobian_positions(pts, ch)
        assert np.max(np.abs(jac - jac.T)) < 1e-9 * max(1.0, np.abs(jac).max())
        # block row sums vanish: rigid translation changes nothing
        shift = np.tile(np.eye(3), (1, n))  # (3, 3n) selector of uniform translations
        assert np.max(np.abs(jac @ shift[0])) < 1e-9 * max(1.0, np.abs(jac).max())

    def test_zero_charges_zero_jacobian(self, rng):
        pts = rng.normal(size=(5, 3))
        jac = force_jacobian_positions(pts, ChargeSet(np.zeros(5)))
        assert np.all(jac == 0.0)

    def test_charge_gradient_matches_fd(self, rng):
        n = 10
        pts = rng.normal(size=(n, 3))
        q = rng.uniform(-4e-6, 4e-6, n)
        ch = ChargeSet(q)
        grad = force_gradient_charges(pts, ch)
        eps = 1e-9
        fd = np.zeros_like(grad)
        for d in range(n):
            e = np.zeros(n)
            e[d] = eps
            fp = pairwise_forces_brute(pts, ch.with_charges(q + e)).reshape(-1)
            fm = pairwise_forces_brute(pts, ch.with_charges(q - e)).reshape(-1)
            fd[:, d] = (fp - fm) / (2 * eps)
        assert np.max(np.abs(fd - grad)) < 1e-5 * np.abs(fd).max()

    def test_doubling_charges_quadruples_forces(self, rng):
        pts = rng.normal(size=(7, 3))
        q = rng.uniform(-4e-6, 4e-6, 7)
        f1 = pairwise_forces_brute(pts, ChargeSet(q))
        f2 = pairwise_forces_brute(pts, ChargeSet(2 * q))
        assert np.allclose(f2, 4 * f1, rtol=1e-12)

    def test_single_charge_zero_gradient(self):
        grad = force_gradient_charges(np.zeros((1, 3)), ChargeSet(np.array([1e-6])))
        assert np.all(grad == 0.0)


class TestExternalJacobians:
    def test_external_position_jacobian_matches_fd(self, rng):
        n = 5
        pts = rng.normal(size=(n, 3))
        ch = ChargeSet(rng.uniform(-4e-6, 4e-6, n))
        forcing = ExternalForcing(
            external_positions=rng.normal(size=(2, 3)) * 3.0,
            external_charges=rng.uniform(-4e-6, 4e-6, 2),
        )
        from qspring.model import external_charge_forces

        jac = external_force_jacobian_positions(pts, ch, forcing)
        flat = pts.reshape(-1)
        eps = 1e-7
        for d in rng.choice(flat.size, size=8, replace=False):
            e = np.zeros_like(flat)
            e[d] = eps
            fp = external_charge_forces((flat + e).reshape(-1, 3), ch, forcing, 1e-6).reshape(-1)
            fm = external_charge_forces((flat - e).reshape(-1, 3), ch, forcing, 1e-6).reshape(-1)
            fd = (fp - fm) / (2 * eps)
            assert np.max(np.abs(fd - jac[:, d])) < 1e-5 * max(np.abs(fd).max(), 1e-12)

    def test_external_charge_gradient_matches_fd(self, rng):
        n = 5
        pts = rng.normal(size=(n, 3))
        q = rng.uniform(-4e-6, 4e-6, n)
        forcing = ExternalForcing(
            field=lambda p: np.stack([p[:, 1], -p[:, 0], p[:, 2]], axis=1),
            external_positions=rng.normal(size=(2, 3)) * 3.0,
            external_charges=rng.uniform(-4e-6, 4e-6, 2),
        )
        from qspring.model import external_charge_forces

        def total(qv):
            ch = ChargeSet(qv)
            f = external_charge_forces(pts, ch, forcing, 1e-6)
            f = f + qv[:, None] * forcing.field(pts)
            return f.reshape(-1)

        grad = external_force_gradient_charges(pts, ChargeSet(q), forcing)
        eps = 1e-9
        for d in range(n):
            e = np.zeros(n)
            e[d] = eps
            fd = (total(q + e) - total(q - e)) / (2 * eps)
            assert np.max(np.abs(fd - grad[:, d])) < 1e-5 * max(np.abs(fd).max(), 1e-12)
