import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scoremd.geometry import (
    Conformation,
    GeometryError,
    Trajectory,
    armse,
    kabsch_armse,
    pair_angles,
    pair_geometry,
    random_rotation,
    relative_position,
    velocity_from_frames,
)


def conf(x, v=None, z=None):
    x = np.asarray(x, dtype=float)
    v = np.zeros_like(x) if v is None else np.asarray(v, dtype=float)
    z = np.ones(len(x), dtype=int) if z is None else z
    return Conformation(x, v, z)


def random_conf(rng, n=5):
    return conf(rng.normal(size=(n, 3)) * 2, rng.normal(size=(n, 3)))


def traj_of(positions):
    positions = np.asarray(positions, dtype=float)
    return Trajectory.from_positions(positions, np.ones(positions.shape[1], dtype=int), 1.0)


# --- types ---------------------------------------------------------------------

def test_conformation_rejects_bad_shapes():
    with pytest.raises(ValueError):
        Conformation(np.zeros((2, 3)), np.zeros((3, 3)), [1, 1])
    with pytest.raises(ValueError):
        Conformation(np.zeros((0, 3)), np.zeros((0, 3)), [])
    with pytest.raises(ValueError):
        Conformation(np.array([[np.nan, 0, 0]]), np.zeros((1, 3)), [1])


def test_default_features_are_speed_and_atom_number():
    c = conf([[0, 0, 0], [1, 0, 0]], [[3, 4, 0], [0, 0, 0]], [6, 8])
    np.testing.assert_allclose(c.features, [[5, 6], [0, 8]])


def test_trajectory_requires_one_roster():
    a = conf([[0, 0, 0]], z=[1])
    b = conf([[1, 0, 0]], z=[2])
    with pytest.raises(ValueError):
        Trajectory([a, b], 1.0)
    with pytest.raises(ValueError):
        Trajectory([], 1.0)


# --- relative_position ------------------------------------------------------------

def test_relative_position_examples():
    c = conf([[1, 2, 3], [0, 2, 3]])
    np.testing.assert_array_equal(relative_position(c, 0, 0), [0, 0, 0])
    np.testing.assert_array_equal(relative_position(c, 0, 1), [1, 0, 0])
    with pytest.raises(IndexError):
        relative_position(c, 0, 2)


def test_relative_position_antisymmetric():
    rng = np.random.default_rng(0)
    for _ in range(100):
        c = random_conf(rng, 4)
        i, j = rng.integers(4, size=2)
        np.testing.assert_array_equal(relative_position(c, i, j), -relative_position(c, j, i))


# --- pair_geometry ------------------------------------------------------------------

def test_pair_geometry_hand_cases():
    # x_ab = x_a - x_b = (1, 0, 0)
    c = conf([[1, 0, 0], [0, 0, 0]], [[0, 1, 0], [0, 1, 0]])
    assert pair_geometry(c, 0, 1).theta == pytest.approx(0.0, abs=1e-12)
    c = conf([[1, 0, 0], [0, 0, 0]], [[0, 1, 0], [0, 0, 1]])
    assert pair_geometry(c, 0, 1).theta == pytest.approx(math.pi / 2, abs=1e-12)
    c = conf([[0, 0, 0], [1, 0, 0]], [[1, 0, 0], [0, 0, 0]])
    pg = pair_geometry(c, 0, 1)
    assert pg.phi_a == pytest.approx(0.0, abs=1e-12)
    assert pg.distance == pytest.approx(np.linalg.norm(pg.rel))


def test_pair_geometry_degenerate():
    c = conf([[0, 0, 0], [0, 0, 0]])
    with pytest.raises(GeometryError):
        pair_geometry(c, 0, 1)
    with pytest.raises(GeometryError):
        pair_geometry(conf([[0, 0, 0], [1, 0, 0]]), 1, 1)


def test_zero_velocity_angles_are_zero():
    c = conf([[0, 0, 0], [1, 0, 0]], [[0, 0, 0], [0, 1, 0]])
    pg = pair_geometry(c, 0, 1)
    assert pg.phi_a == 0.0 and pg.theta == 0.0
    assert pg.phi_b == pytest.approx(math.pi / 2)


def test_pair_angles_match_pairwise_calls():
    rng = np.random.default_rng(1)
    c = random_conf(rng, 4)
    dist, pa, pb, th = pair_angles(c.positions, c.velocities)
    for a in range(4):
        for b in range(4):
            if a == b:
                continue
            pg = pair_geometry(c, a, b)
            assert dist[a, b] == pytest.approx(pg.distance)
            assert (pa[a, b], pb[a, b], th[a, b]) == pytest.approx((pg.phi_a, pg.phi_b, pg.theta))


def test_pair_geometry_rigid_invariance():
    rng = np.random.default_rng(2)
    for _ in range(50):
        c = random_conf(rng, 3)
        q = random_rotation(rng)
        moved = c.transformed(q, rng.normal(size=3) * 5)
        for a, b in [(0, 1), (1, 2), (2, 0)]:
            p0, p1 = pair_geometry(c, a, b), pair_geometry(moved, a, b)
            np.testing.assert_allclose(
                [p0.distance, p0.phi_a, p0.phi_b, p0.theta],
                [p1.distance, p1.phi_a, p1.phi_b, p1.theta], atol=1e-10)


vec = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3)


@settings(max_examples=200, deadline=None)
@given(vec, vec, vec, vec)
def test_theta_symmetric_and_in_range(xa, xb, va, vb):
    x = np.array([xa, xb])
    if np.linalg.norm(x[0] - x[1]) < 1e-3:
        return
    v = np.array([va, vb])
    _, pa, pb, th = pair_angles(x, v)
    _, pa2, pb2, th2 = pair_angles(x[::-1], v[::-1])
    assert th[0, 1] == pytest.approx(th2[0, 1], abs=1e-9)
    for ang in (pa[0, 1], pb[0, 1], th[0, 1]):
        assert 0.0 <= ang <= math.pi


# --- velocity_from_frames --------------------------------------------------------------

def test_velocity_from_frames():
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(velocity_from_frames(x, x), np.zeros((2, 3)))
    np.testing.assert_allclose(velocity_from_frames(x + [0.1, 0, 0], x), [[0.1, 0, 0]] * 2)
    with pytest.raises(ValueError):
        velocity_from_frames(x, x[:1])


def test_constant_velocity_trajectory():
    v = np.array([[0.3, -0.1, 0.2], [0.0, 0.5, 0.0]])
    xs = np.array([np.zeros((2, 3)) + k * v for k in range(6)])
    tr = traj_of(xs)
    for t in range(1, 6):
        np.testing.assert_allclose(tr[t].velocities, v, atol=1e-14)


# --- armse -----------------------------------------------------------------------------

def test_armse_hand_cases():
    ref = traj_of(np.zeros((2, 1, 3)))
    assert armse(ref, ref, 0, 1) == 0.0
    one = traj_of([[[1.0, 0, 0]]])
    assert armse(one, traj_of([[[0.0, 0, 0]]]), 0, 0) == pytest.approx(1.0, abs=1e-12)
    gen = traj_of([[[3.0, 0, 0]], [[0, 4.0, 0]]])
    assert armse(gen, ref, 0, 1) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert math.sqrt(12.5) == pytest.approx(3.53553, abs=1e-5)


def test_armse_argument_errors():
    a = traj_of(np.zeros((3, 2, 3)))
    b = traj_of(np.zeros((3, 1, 3)))
    with pytest.raises(ValueError):
        armse(a, b, 0, 1)
    with pytest.raises(ValueError):
        armse(a, a, 2, 1)
    with pytest.raises(ValueError):
        armse(a, a, 0, 3)


def test_armse_joint_transform_invariance_only():
    rng = np.random.default_rng(3)
    g = rng.normal(size=(4, 3, 3))
    r = rng.normal(size=(4, 3, 3))
    q = random_rotation(rng)
    o = rng.normal(size=3)
    base = armse(traj_of(g), traj_of(r), 0, 3)
    joint = armse(traj_of(g @ q.T + o), traj_of(r @ q.T + o), 0, 3)
    assert joint == pytest.approx(base, rel=1e-12)
    assert armse(traj_of(g @ q.T + o), traj_of(r), 0, 3) != pytest.approx(base, rel=1e-3)


def test_kabsch_armse_removes_rigid_motion():
    rng = np.random.default_rng(4)
    r = rng.normal(size=(5, 4, 3))
    moved = np.stack([f @ random_rotation(rng).T + rng.normal(size=3) for f in r])
    assert kabsch_armse(traj_of(moved), traj_of(r), 0, 4) < 1e-10
    assert kabsch_armse(traj_of(r), traj_of(r), 0, 4) < 1e-12


def test_kabsch_armse_never_exceeds_armse():
    rng = np.random.default_rng(5)
    for _ in range(100):
        g, r = traj_of(rng.normal(size=(3, 4, 3))), traj_of(rng.normal(size=(3, 4, 3)))
        assert kabsch_armse(g, r, 0, 2) <= armse(g, r, 0, 2) + 1e-12
