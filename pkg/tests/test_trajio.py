import numpy as np
import pytest

from qspring.integrators import energy_series, rollout
from qspring.model import ConfigError, ExternalForcing, SimParams
from qspring import trajio

from conftest import random_spring_system


@pytest.fixture
def short_traj(rng):
    state, topo, masses, charges = random_spring_system(rng, n=5)
    traj = rollout(state, topo, masses, charges, ExternalForcing.none(), SimParams(h=0.02), steps=7)
    return traj, topo, masses, charges


class TestBinaryFormat:
    def test_round_trip_bitwise(self, short_traj, tmp_path):
        traj, *_ = short_traj
        path = tmp_path / "run.bin"
        trajio.write_trajectory(path, traj)
        times, positions, velocities, h = trajio.read_trajectory(path)
        assert h == traj.params.h
        assert np.array_equal(times, traj.times)
        assert np.array_equal(positions, traj.positions_matrix())
        assert np.array_equal(velocities, np.stack([s.velocities for s in traj.states]))

    def test_header_fields(self, short_traj, tmp_path):
        traj, *_ = short_traj
        path = tmp_path / "run.bin"
        trajio.write_trajectory(path, traj)
        raw = path.read_bytes()
        assert raw[:8] == trajio.MAGIC
        import struct

        _, n, frames, h = struct.unpack_from("<8sQQd", raw, 0)
        assert n == 5 and frames == 8 and h == 0.02

    def test_truncated_rejected(self, short_traj, tmp_path):
        traj, *_ = short_traj
        path = tmp_path / "run.bin"
        trajio.write_trajectory(path, traj)
        path.write_bytes(path.read_bytes()[:-9])
        with pytest.raises(ConfigError):
            trajio.read_trajectory(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTATRAJ" + b"\0" * 64)
        with pytest.raises(ConfigError):
            trajio.read_trajectory(path)

    def test_trajectory_from_file(self, short_traj, tmp_path):
        traj, *_ = short_traj
        path = tmp_path / "run.bin"
        trajio.write_trajectory(path, traj)
        back = trajio.trajectory_from_file(path)
        assert len(back.states) == len(traj.states)
        assert np.array_equal(back.states[-1].positions, traj.states[-1].positions)


class TestCsv:
    def test_positions_csv_shape(self, short_traj, tmp_path):
        traj, *_ = short_traj
        path = tmp_path / "run.csv"
        trajio.write_positions_csv(path, traj)
        lines = path.read_text().strip().splitlines()
        assert len(lines) == 9  # header + 8 frames
        assert lines[0].split(",")[:2] == ["frame", "time"]
        assert len(lines[1].split(",")) == 2 + 15

    def test_energy_csv_values_round_trip(self, short_traj, tmp_path):
        traj, topo, masses, charges = short_traj
        times, breakdowns = energy_series(traj, topo, masses, charges, ExternalForcing.none())
        path = tmp_path / "energy.csv"
        trajio.write_energy_csv(path, times, breakdowns)
        rows = path.read_text().strip().splitlines()[1:]
        for row, e in zip(rows, breakdowns):
            cols = row.split(",")
            assert float(cols[6]) == e.total  # repr round-trips exactly

    def test_error_csv(self, tmp_path):
        path = tmp_path / "err.csv"
        trajio.write_error_csv(path, np.array([0.0, 0.1]), np.array([0.0, 0.25]))
        rows = path.read_text().strip().splitlines()
        assert rows[0] == "time,relative_energy_error"
        assert len(rows) == 3


class TestTable:
    def test_format_table(self):
        rows = [{"n": 10, "t": 0.25}, {"n": 2000, "t": 1.5}]
        text = trajio.format_table(rows, ["n", "t"])
        lines = text.strip().splitlines()
        assert len(lines) == 3
        assert "2000" in lines[2]
