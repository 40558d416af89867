import numpy as np
import pytest

from scoremd.geometry import Conformation, Trajectory
from scoremd.xyz import TrajectoryFormatError, parse_xyz, read_xyz, write_xyz


def sample_traj():
    rng = np.random.default_rng(0)
    frames = [Conformation(rng.normal(size=(3, 3)), rng.normal(size=(3, 3)), [8, 1, 1])
              for _ in range(4)]
    return Trajectory(frames, 0.5)


def test_roundtrip_is_exact(tmp_path):
    tr = sample_traj()
    path = tmp_path / "t.xyz"
    write_xyz(path, tr)
    back = read_xyz(path)
    assert back.dt == 0.5
    np.testing.assert_array_equal(back.positions(), tr.positions())
    np.testing.assert_array_equal(back.velocities(), tr.velocities())
    np.testing.assert_array_equal(back.atom_numbers, [8, 1, 1])


def test_positions_only_rebuilds_velocities():
    text = "1\nt=0 dt=1.0\nH 0 0 0\n1\nt=1 dt=1.0\nH 0.1 0 0\n1\nt=2 dt=1.0\nH 0.3 0 0\n"
    tr = parse_xyz(text)
    np.testing.assert_allclose(tr.velocities()[:, 0, 0], [0.0, 0.1, 0.2])
    assert tr.meta["velocities_from_file"] is False


@pytest.mark.parametrize("text", [
    "2\nc\nH 0 0 0\n",
    "x\nc\nH 0 0 0\n",
    "1\nc\nH 0 0\n",
    "1\nc\nQq 0 0 0\n",
    "1\nc\nH 0 0 0\n1\nc\nHe 0 0 0\n",
    "1\nc\nH 0 0 0 1 1 1\n1\nc\nH 0 0 0\n",
    "",
])
def test_malformed_files_rejected(text):
    with pytest.raises(TrajectoryFormatError):
        parse_xyz(text)
