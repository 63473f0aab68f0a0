"""Batch command-line interface.

Exit codes: 0 success, 2 configuration error, 3 divergence, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import ddef, trajio
from .grad import EstimateOptions, ParamSelector, estimate_parameters
from .integrators import energy_series, relative_energy_error, rollout, total_energy
from .model import ChargeSet, ConfigError, DivergenceError, SimParams, SimulationError
from .scene import Scene, load_scene, run_scene

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _apply_threads(count):
    if count is None:
        return
    try:
        import threadpoolctl

        threadpoolctl.threadpool_limits(limits=int(count))
    except Exception:
        pass  # thread capping is best-effort


def _scene_overrides(args) -> dict:
    out = {}
    if getattr(args, "integrator", None):
        out["integrator"] = args.integrator
    if getattr(args, "forces", None):
        out["forces"] = args.forces
    if getattr(args, "steps", None) is not None:
        out["steps"] = args.steps
    return out


def _override_params(scene: Scene, args) -> SimParams:
    params = scene.params
    if getattr(args, "h", None) is not None:
        params = params.replace(h=args.h)
    if getattr(args, "m", None) is not None:
        params = params.replace(ddef_m=args.m)
    if getattr(args, "forces", None):
        params = params.replace(ddef_enabled=args.forces == "ddef")
    return params


def cmd_simulate(args) -> int:
    scene = load_scene(args.config)
    params = _override_params(scene, args)
    out_prefix = Path(args.output)
    out_prefix.parent.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        traj = run_scene(scene, params=params, record_every=args.record_every, **_scene_overrides(args))
    except DivergenceError as exc:
        print(f"divergence at step {exc.step_index}", file=sys.stderr)
        if exc.trajectory is not None and args.keep_partial:
            trajio.write_trajectory(str(out_prefix) + ".bin", exc.trajectory)
        return EXIT_DIVERGED
    elapsed = time.perf_counter() - t0
    trajio.write_trajectory(str(out_prefix) + ".bin", traj)
    times, breakdowns = energy_series(
        traj, scene.topology, scene.masses, scene.charges, scene.forcing,
        params.gravity, params.softening_epsilon,
    )
    trajio.write_energy_csv(str(out_prefix) + "_energy.csv", times, breakdowns)
    if args.csv:
        trajio.write_positions_csv(str(out_prefix) + ".csv", traj)
    final = breakdowns[-1]
    print(
        f"simulated {scene.name}: {len(traj.states)} frames, n={scene.vertex_count}, "
        f"h={params.h}, integrator={args.integrator or scene.integrator}, "
        f"wall={elapsed:.2f}s, final total energy={final.total:.6g} J"
    )
    return EXIT_OK


def cmd_validate(args) -> int:
    scene = load_scene(args.config)
    ref_scene = load_scene(args.reference_config)
    traj = run_scene(scene, raise_on_divergence=False)
    ref = run_scene(ref_scene, raise_on_divergence=False)
    if ref.diverged_at is not None:
        print(f"reference diverged at step {ref.diverged_at}", file=sys.stderr)
        return EXIT_DIVERGED
    times, errors = relative_energy_error(
        traj, ref, scene.topology, scene.masses, scene.charges, scene.forcing,
        scene.params.gravity, scene.params.softening_epsilon,
    )
    trajio.write_error_csv(args.output, times, errors)
    finite = errors[np.isfinite(errors)]
    mean = float(finite.mean()) if finite.size else float("inf")
    std = float(finite.std()) if finite.size else float("inf")
    print(
        f"validate {scene.name}: {times.size} shared frames, mean error={mean:.4f}, "
        f"std={std:.4f}, max={float(np.max(errors)) if errors.size else float('inf'):.4f}"
        + (f", diverged at step {traj.diverged_at}" if traj.diverged_at is not None else "")
    )
    return EXIT_OK


def _parse_range(text: str) -> np.ndarray:
    lo, hi, count = text.split(":")
    return np.linspace(float(lo), float(hi), int(count))


def cmd_sweep(args) -> int:
    scene = load_scene(args.config)
    k_values = _parse_range(args.k_range)
    q_values = _parse_range(args.q_range)
    h = args.h if args.h is not None else scene.params.h
    ref_h = args.ref_h
    frame = args.frame
    t_eval = frame * h

    ref_steps = int(round(t_eval / ref_h))
    if abs(ref_steps * ref_h - t_eval) > 1e-9 * max(1.0, t_eval):
        print("frame time is not representable at the reference timestep", file=sys.stderr)
        return EXIT_CONFIG

    rows = []
    for k in k_values:
        topo = scene.topology.with_stiffness(np.full(scene.topology.spring_count, float(k)))
        for q_uc in q_values:
            charges = ChargeSet.uniform(scene.vertex_count, float(q_uc) * 1e-6, scene.charges.coulomb_constant)
            traj = rollout(
                scene.state, topo, scene.masses, charges, scene.forcing,
                scene.params.replace(h=h), steps=frame, integrator="imex",
                forces=scene.forces, record_every=frame, pinned=scene.pinned,
                raise_on_divergence=False,
            )
            ref = rollout(
                scene.state, topo, scene.masses, charges, scene.forcing,
                scene.params.replace(h=ref_h), steps=ref_steps, integrator="verlet",
                forces="brute", record_every=ref_steps, pinned=scene.pinned,
                raise_on_divergence=False,
            )
            if traj.diverged_at is not None or ref.diverged_at is not None:
                error = float("inf")
            else:
                kwargs = dict(gravity=scene.params.gravity, softening_epsilon=scene.params.softening_epsilon)
                e_sim = total_energy(traj.states[-1], topo, scene.masses, charges, scene.forcing, **kwargs).total
                e_ref = total_energy(ref.states[-1], topo, scene.masses, charges, scene.forcing, **kwargs).total
                e0 = total_energy(ref.states[0], topo, scene.masses, charges, scene.forcing, **kwargs).total
                floor = max(1e-12 * abs(e0), np.finfo(float).tiny)
                error = abs(e_sim - e_ref) / max(abs(e_ref), floor)
            rows.append({"k": float(k), "q_uC": float(q_uc), "error": error})

    with open(args.output, "w") as fh:
        fh.write("k,q_uC,error\n")
        for row in rows:
            fh.write(f"{row['k']!r},{row['q_uC']!r},{row['error']!r}\n")
    worst = max(rows, key=lambda r: r["error"])
    print(
        f"sweep {scene.name}: {len(rows)} cells, frame {frame} at h={h} vs verlet h={ref_h}; "
        f"max error {worst['error']:.4f} at k={worst['k']:.3g}, q={worst['q_uC']:.3g} uC"
    )
    return EXIT_OK


def cmd_estimate(args) -> int:
    scene = load_scene(args.config)
    times, positions, _, _ = trajio.read_trajectory(args.target)
    target = positions[-1]
    if target.size != 3 * scene.vertex_count:
        print("target trajectory does not match the scene", file=sys.stderr)
        return EXIT_CONFIG
    selector = ParamSelector(kind=args.kind, tied=True)
    options = EstimateOptions(
        steps=args.steps if args.steps is not None else scene.steps,
        integrator=args.integrator or scene.integrator,
        forces=args.forces or scene.forces,
        step_size=args.step_size,
        max_iterations=args.max_iterations,
        loss_tol=args.loss_tol,
        grad_tol=args.grad_tol,
        theta_min=args.theta_min,
        theta_max=args.theta_max,
    )
    result = estimate_parameters(
        scene.state, scene.topology, scene.masses, scene.charges, scene.forcing,
        scene.params, target, selector, options, pinned=scene.pinned,
    )
    report = result.report_text()
    if args.output:
        Path(args.output).write_text(report + "\n")
    print(report)
    return EXIT_OK if result.status in ("converged", "max_iterations", "stalled") else EXIT_DIVERGED


def cmd_bench_ddef(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    m_values = [int(m) for m in args.m_values.split(",")]
    from .meshgen import random_cloud

    rows = []
    for n in sizes:
        points = random_cloud(n, extent=1.0, seed=1234)
        charges = ChargeSet.uniform(n, 6e-6)
        t0 = time.perf_counter()
        exact = ddef.pairwise_field_brute(points, charges)
        t_brute = time.perf_counter() - t0
        for m in m_values:
            t0 = time.perf_counter()
            grid = ddef.discretize_domain(points, m)
            neigh = ddef.build_neighborhoods(grid, points)
            table = ddef.gather_far_field(grid, neigh, points, charges)
            approx = ddef.evaluate_field(grid, neigh, table, points, charges)
            t_ddef = time.perf_counter() - t0
            rows.append(
                {
                    "n": n,
                    "m": m,
                    "brute_s": t_brute,
                    "ddef_s": t_ddef,
                    "mean_rel_error": ddef.mean_relative_error(approx, exact),
                }
            )
    print(trajio.format_table(rows, ["n", "m", "brute_s", "ddef_s", "mean_rel_error"]))
    return EXIT_OK


def cmd_serve(args) -> int:
    from .service import serve_forever

    scene = load_scene(args.scene)
    serve_forever(scene, host=args.host, port=args.port, throttle=args.throttle,
                  realtime=not args.no_realtime, start_paused=args.paused)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qspring", description=__doc__)
    parser.add_argument("--threads", type=int, default=None, help="cap BLAS thread count")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="roll a scene out and write trajectory + energy files")
    p.add_argument("--config", required=True)
    p.add_argument("--output", required=True, help="output path prefix")
    p.add_argument("--integrator", choices=["imex", "verlet", "explicit"])
    p.add_argument("--forces", choices=["brute", "ddef"])
    p.add_argument("--h", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--m", type=int, help="grid sample count for the ddef backend")
    p.add_argument("--record-every", type=int, default=1)
    p.add_argument("--csv", action="store_true", help="also write a positions CSV")
    p.add_argument("--keep-partial", action="store_true", help="write the partial trajectory on divergence")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("validate", help="relative energy error of a run against a reference run")
    p.add_argument("--config", required=True)
    p.add_argument("--reference-config", required=True)
    p.add_argument("--output", default="validate_error.csv")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("sweep", help="stiffness/charge error heatmap at a fixed frame")
    p.add_argument("--config", required=True)
    p.add_argument("--k-range", required=True, help="lo:hi:count in N/m")
    p.add_argument("--q-range", required=True, help="lo:hi:count in uC")
    p.add_argument("--h", type=float)
    p.add_argument("--ref-h", type=float, default=0.01)
    p.add_argument("--frame", type=int, default=100)
    p.add_argument("--output", default="sweep.csv")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("estimate", help="recover charges or spring constants from a target trajectory")
    p.add_argument("--config", required=True)
    p.add_argument("--target", required=True, help="target trajectory .bin")
    p.add_argument("--kind", choices=["charges", "spring_constants"], required=True)
    p.add_argument("--integrator", choices=["imex", "verlet"])
    p.add_argument("--forces", choices=["brute", "ddef"])
    p.add_argument("--steps", type=int)
    p.add_argument("--step-size", type=float, default=0.25)
    p.add_argument("--max-iterations", type=int, default=200)
    p.add_argument("--loss-tol", type=float, default=0.0)
    p.add_argument("--grad-tol", type=float, default=0.0)
    p.add_argument("--theta-min", type=float)
    p.add_argument("--theta-max", type=float)
    p.add_argument("--output", help="write the report here as well")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("bench-ddef", help="timing/accuracy table of brute vs grid-approximated fields")
    p.add_argument("--sizes", default="1000,5000")
    p.add_argument("--m-values", default="100,1000")
    p.set_defaults(func=cmd_bench_ddef)

    p = sub.add_parser("serve", help="host a live simulation over a websocket")
    p.add_argument("--scene", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8787)
    p.add_argument("--throttle", type=int, default=1, help="broadcast every k-th frame")
    p.add_argument("--paused", action="store_true", help="start paused; a client sends play")
    p.add_argument("--no-realtime", action="store_true", help="step as fast as possible")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _apply_threads(args.threads)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except SimulationError as exc:
        print(f"simulation error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
