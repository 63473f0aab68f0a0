"""Regenerate the checked-in scene presets that need a relaxation pass.

Scenes whose initial state must sit at the spring/charge equilibrium (so that
runs start quiet) are relaxed here with the damped implicit stepper and baked
into inline configs. Everything is deterministic; running this script twice
produces identical files.
"""
from __future__ import annotations

import pathlib
import sys

import numpy as np

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent.parent / "src"))

from qspring.integrators import rollout
from qspring.meshgen import blob_mesh
from qspring.model import ChargeSet, ExternalForcing, MassModel, SimParams, SimState
from qspring.scene import MeshSource, Scene, serialize_scene, springs_from_mesh

CONFIG_DIR = pathlib.Path(__file__).resolve().parent.parent / "configs"


def _net_force(points, topology, charges):
    from qspring.coulomb import pairwise_forces_brute
    from qspring.elastic import spring_forces

    f = spring_forces(points.reshape(-1), topology)
    f += pairwise_forces_brute(points, charges).reshape(-1)
    return f


def relax(verts, topology, masses, charges, h=0.03, steps=1500, quasi_static_iters=400, mix=0.5):
    """Damped dynamic settling followed by quasi-static fixed-point polishing."""
    state = SimState.at_rest(verts)
    params = SimParams(h=h, local_global_iterations=50, local_global_tol=1e-12)
    traj = rollout(
        state, topology, masses, charges, ExternalForcing.none(), params,
        steps=steps, integrator="imex", record_every=steps,
    )
    pts = traj.states[-1].points()

    # quasi-static polish: huge-h implicit steps from rest, under-relaxed
    from qspring.elastic import assemble_operators, local_step, prefactor

    big_h = 1e3
    ops = assemble_operators(topology)
    pre = prefactor(masses, ops, big_h)
    from qspring.coulomb import pairwise_forces_brute

    mdiag = masses.diagonal()
    x = pts.reshape(-1).copy()
    for _ in range(quasi_static_iters):
        q = pairwise_forces_brute(x.reshape(-1, 3), charges).reshape(-1)
        y = x
        xi = x
        for _ in range(200):
            d = local_step(xi, topology)
            x_new = pre.solve(mdiag * y + big_h * big_h * (ops.assembly @ d + q))
            if np.max(np.abs(x_new - xi)) <= 1e-14 * max(1.0, np.max(np.abs(x_new))):
                xi = x_new
                break
            xi = x_new
        x = (1.0 - mix) * x + mix * xi
    residual = np.abs(_net_force(x.reshape(-1, 3), topology, charges)).max()
    print(f"  relaxed: max residual net force {residual:.3e} N")
    return SimState.at_rest(x.reshape(-1, 3))


def make_duck() -> None:
    # inflated blob in spring/charge balance; charge recovery starts from here
    scale = 30.0
    verts, edges = blob_mesh(
        count=280, radii=(1.1 * scale, 0.9 * scale, 1.3 * scale),
        bump_amplitude=0.15, bump_frequency=3, seed=42,
    )
    mesh = MeshSource(verts, edges)
    topology = springs_from_mesh(mesh, 2.5)
    n = mesh.vertex_count
    masses = MassModel.uniform(n, 0.01)
    charges = ChargeSet.uniform(n, 80e-6)
    print(f"duck blob: {n} vertices, {topology.spring_count} springs")
    state = relax(verts, topology, masses, charges)
    scene = Scene(
        name="duck-charge-recovery",
        state=state,
        topology=topology,
        masses=masses,
        charges=charges,
        forcing=ExternalForcing.none(),
        params=SimParams(h=0.009, local_global_iterations=100, local_global_tol=1e-13),
        steps=1000,
        integrator="imex",
        forces="brute",
    )
    (CONFIG_DIR / "duck_charge_recovery.toml").write_text(serialize_scene(scene))
    print("  wrote configs/duck_charge_recovery.toml")


def make_rotation_bunny() -> None:
    # equilibrated charged blob, offset in +z, spun up by the analytic field
    s = 4.25
    verts, edges = blob_mesh(
        count=150, radii=(0.55 * s, 0.42 * s, 0.7 * s),
        bump_amplitude=0.12, bump_frequency=3, seed=7,
    )
    mesh = MeshSource(verts, edges)
    topology = springs_from_mesh(mesh, 10.0)
    n = mesh.vertex_count
    masses = MassModel.uniform(n, 1.0)
    charges = ChargeSet.uniform(n, 8e-6)
    print(f"rotation bunny: {n} vertices, {topology.spring_count} springs")
    state = relax(verts, topology, masses, charges, h=0.05, steps=1200)
    shifted = SimState.at_rest(state.points() + np.array([0.0, 0.0, 3.0 * s]))
    from qspring.fieldexpr import compile_field

    expr = "[y/z, x/z, 0]"
    scene = Scene(
        name="bunny-field-rotation",
        state=shifted,
        topology=topology,
        masses=masses,
        charges=charges,
        forcing=ExternalForcing(field=compile_field(expr), field_expression=expr),
        params=SimParams(h=0.05),
        steps=100,
        integrator="imex",
        forces="brute",
    )
    (CONFIG_DIR / "bunny_field_rotation.toml").write_text(serialize_scene(scene))
    print("  wrote configs/bunny_field_rotation.toml")


if __name__ == "__main__":
    CONFIG_DIR.mkdir(exist_ok=True)
    make_duck()
    make_rotation_bunny()
