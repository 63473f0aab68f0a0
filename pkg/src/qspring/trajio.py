"""Trajectory and energy-series file formats.

Binary layout (all little-endian):
    magic   8 bytes  b"QSPRTRJ1"
    n       uint64   vertex count
    frames  uint64   recorded frame count
    h       float64  integrator timestep (recording stride may be coarser)
    then per frame: time float64, positions 3n float64, velocities 3n float64

The CSV variants exist for plotting and diffing; the binary file is the
round-trip format.
"""
from __future__ import annotations

import csv
import io
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .integrators import EnergyBreakdown, Trajectory
from .model import ConfigError, SimParams, SimState

MAGIC = b"QSPRTRJ1"
_HEADER = struct.Struct("<8sQQd")


def write_trajectory(path, traj: Trajectory) -> None:
    """Serialize a trajectory to the flat binary format."""
    n = traj.vertex_count
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, n, len(traj.states), traj.params.h))
        for state in traj.states:
            fh.write(struct.pack("<d", state.time))
            fh.write(state.positions.astype("<f8").tobytes())
            fh.write(state.velocities.astype("<f8").tobytes())


def read_trajectory(path) -> tuple[np.ndarray, np.ndarray, np.ndarray, float]:
    """Read back (times, positions, velocities, h); arrays are (frames, 3n)."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise ConfigError(f"{path}: not a trajectory file")
    magic, n, frames, h = _HEADER.unpack_from(raw, 0)
    if magic != MAGIC:
        raise ConfigError(f"{path}: bad magic {magic!r}")
    frame_bytes = 8 * (1 + 6 * n)
    expected = _HEADER.size + frames * frame_bytes
    if len(raw) != expected:
        raise ConfigError(f"{path}: truncated trajectory ({len(raw)} bytes, expected {expected})")
    times = np.empty(frames)
    positions = np.empty((frames, 3 * n))
    velocities = np.empty((frames, 3 * n))
    offset = _HEADER.size
    for f in range(frames):
        (times[f],) = struct.unpack_from("<d", raw, offset)
        offset += 8
        positions[f] = np.frombuffer(raw, dtype="<f8", count=3 * n, offset=offset)
        offset += 24 * n
        velocities[f] = np.frombuffer(raw, dtype="<f8", count=3 * n, offset=offset)
        offset += 24 * n
    return times, positions, velocities, h


def trajectory_from_file(path, params: SimParams | None = None) -> Trajectory:
    """Rebuild a Trajectory object (states only) from a binary file."""
    times, positions, velocities, h = read_trajectory(path)
    params = params if params is not None else SimParams(h=h)
    states = []
    prev = positions[0]
    for f in range(times.size):
        states.append(SimState(positions[f], velocities[f], prev, times[f]))
        prev = positions[f]
    return Trajectory(states=states, params=params, integrator="file")


def write_positions_csv(path, traj: Trajectory) -> None:
    """One row per frame: frame, time, then x/y/z per vertex."""
    n = traj.vertex_count
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["frame", "time"]
        for v in range(n):
            header += [f"x{v}", f"y{v}", f"z{v}"]
        writer.writerow(header)
        for f, state in enumerate(traj.states):
            writer.writerow([f, repr(state.time)] + [repr(x) for x in state.positions])


def write_energy_csv(path, times: np.ndarray, breakdowns: Iterable[EnergyBreakdown]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["frame", "time", "kinetic", "elastic", "coulomb", "external_potential", "total"])
        for f, (t, e) in enumerate(zip(times, breakdowns)):
            writer.writerow(
                [f, repr(float(t)), repr(e.kinetic), repr(e.elastic), repr(e.coulomb),
                 repr(e.external_potential), repr(e.total)]
            )


def write_error_csv(path, times: np.ndarray, errors: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time", "relative_energy_error"])
        for t, e in zip(times, errors):
            writer.writerow([repr(float(t)), repr(float(e))])


def format_table(rows: list[dict], columns: list[str]) -> str:
    """Fixed-width text table used by the benchmark and sweep summaries."""
    widths = {c: max(len(c), *(len(_fmt(r.get(c, ""))) for r in rows)) if rows else len(c) for c in columns}
    out = io.StringIO()
    out.write("  ".join(c.rjust(widths[c]) for c in columns) + "\n")
    for r in rows:
        out.write("  ".join(_fmt(r.get(c, "")).rjust(widths[c]) for c in columns) + "\n")
    return out.getvalue()


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)
