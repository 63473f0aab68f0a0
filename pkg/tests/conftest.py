import numpy as np
import pytest

from qspring.model import ChargeSet, ExternalForcing, MassModel, SimState, SpringTopology


def random_spring_system(rng, n=8, extra_springs=6, charge_scale=2e-6, spread=1.0):
    """A connected random scene: spanning-tree springs plus a few extras."""
    pts = rng.normal(size=(n, 3)) * spread
    springs = []
    seen = set()
    for v in range(1, n):  # spanning tree keeps the system connected
        u = int(rng.integers(0, v))
        rest = np.linalg.norm(pts[v] - pts[u]) * rng.uniform(0.8, 1.2)
        springs.append((u, v, rng.uniform(2.0, 8.0), rest))
        seen.add((u, v))
    tries = 0
    while len(springs) < n - 1 + extra_springs and tries < 100:
        tries += 1
        a, b = sorted(rng.integers(0, n, 2).tolist())
        if a == b or (a, b) in seen:
            continue
        seen.add((a, b))
        rest = np.linalg.norm(pts[a] - pts[b]) * rng.uniform(0.8, 1.2)
        springs.append((a, b, rng.uniform(2.0, 8.0), rest))
    topology = SpringTopology.from_springs(springs, n)
    masses = MassModel(rng.uniform(0.5, 2.0, n))
    charges = ChargeSet(rng.uniform(-charge_scale, charge_scale, n))
    state = SimState(
        pts.reshape(-1),
        rng.normal(size=3 * n) * 0.1,
        pts.reshape(-1),
        0.0,
    )
    return state, topology, masses, charges


def consistent_state(positions, velocities, h):
    """State whose stored history matches the velocity convention of the implicit stepper."""
    x = np.asarray(positions, dtype=float).reshape(-1)
    v = np.asarray(velocities, dtype=float).reshape(-1)
    return SimState(x, v, x - h * v, 0.0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def zero_forcing():
    return ExternalForcing.none()
