import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mcss import geometry as geo
from mcss.errors import DegeneratePoseError, InvalidArgumentError, ProjectionError, ValidationError
from mcss.metrics import mpjpe

from conftest import random_pose
from oracles import grid_canonical_theta, homogeneous_project


def test_rotation_z_identity():
    assert np.array_equal(geo.rotation_z(0.0), np.eye(3))


def test_rotation_z_quarter_turn():
    np.testing.assert_allclose(geo.rotation_z(math.pi / 2) @ [1, 0, 0], [0, 1, 0], atol=1e-15)


def test_rotation_z_is_proper():
    R = geo.rotation_z(0.37)
    assert np.abs(R @ R.T - np.eye(3)).max() < 1e-12
    assert abs(np.linalg.det(R) - 1) < 1e-12


@pytest.mark.parametrize("bad", [float("nan"), float("inf")])
def test_rotation_z_rejects_non_finite(bad):
    with pytest.raises(InvalidArgumentError):
        geo.rotation_z(bad)


def _pose_with_lh(lh, rng):
    p = random_pose(rng)
    p[geo.LEFT_HIP] = lh
    return p


def test_canonical_already_satisfied(rng):
    p = _pose_with_lh([100, 0, 20], rng)
    out, theta = geo.canonical_transform(p)
    assert theta == 0.0
    np.testing.assert_array_equal(out, p)


def test_canonical_quarter_turn(rng):
    p = _pose_with_lh([0, 100, 0], rng)
    out, theta = geo.canonical_transform(p)
    assert theta == pytest.approx(-math.pi / 2)
    np.testing.assert_allclose(out[geo.LEFT_HIP], [100, 0, 0], atol=1e-12)
    np.testing.assert_allclose(p @ geo.rotation_z(theta).T, out, atol=1e-12)


def test_canonical_matches_grid_oracle(rng):
    for _ in range(20):
        p = random_pose(rng)
        out, _ = geo.canonical_transform(p)
        theta = grid_canonical_theta(p[geo.LEFT_HIP, :2])[0]
        oracle = p @ geo.rotation_z(theta).T
        assert abs(out[geo.LEFT_HIP, 1]) < 1e-9
        assert mpjpe(out, oracle) < 1e-6


def test_canonical_degenerate_bone(rng):
    p = _pose_with_lh([0, 0, 0], rng)
    with pytest.raises(DegeneratePoseError):
        geo.canonical_transform(p)
    p[geo.LEFT_HIP] = [5e-7, 0, 0]
    with pytest.raises(DegeneratePoseError):
        geo.canonical_transform(p)


def test_canonical_batch_matches_single(rng):
    P = np.stack([random_pose(rng) for _ in range(8)])
    out, theta = geo.canonical_transform_batch(P)
    for k in range(8):
        o, t = geo.canonical_transform(P[k])
        np.testing.assert_allclose(out[k], o, atol=1e-10)
        assert theta[k] == pytest.approx(t, abs=1e-15)


angles = st.floats(0, 2 * math.pi, allow_nan=False)
seeds = st.integers(0, 2**32 - 1)


@settings(max_examples=200, deadline=None)
@given(seeds, angles)
def test_canonical_properties(seed, phi):
    p = random_pose(np.random.default_rng(seed))
    c, _ = geo.canonical_transform(p)
    c_rot, _ = geo.canonical_transform(p @ geo.rotation_z(phi).T)
    assert mpjpe(c, c_rot) < 1e-9
    assert abs(geo.canonical_transform(c)[1]) < 1e-9
    d_in = np.linalg.norm(p[:, None] - p[None], axis=-1)
    d_out = np.linalg.norm(c[:, None] - c[None], axis=-1)
    assert np.abs(d_in - d_out).max() < 1e-9
    assert c[geo.LEFT_HIP, 0] >= 0


def test_as_pose_validates():
    with pytest.raises(ValidationError):
        geo.as_pose(np.zeros((15, 3)))
    p = np.zeros((16, 3))
    p[0] = [1, 0, 0]
    with pytest.raises(ValidationError):
        geo.as_pose(p)
    p[0] = 0
    p[3, 1] = np.nan
    with pytest.raises(ValidationError):
        geo.as_pose(p)


def test_orthographic_is_rigid_transform_then_drop_depth(rng):
    cam = geo.Camera(0.0, 0.0, 4500.0, "orthographic")
    p = random_pose(rng)
    R, t = cam.world_to_camera()
    expected = (p @ R.T + t)[:, :2] / geo.HALF_EXTENT_MM
    np.testing.assert_allclose(geo.project(p, cam).reshape(16, 2), expected, atol=1e-15)


def test_azimuth_changes_observation(rng):
    p = random_pose(rng)
    a = geo.project(p, geo.Camera(0.0, 0.1, 4500.0))
    b = geo.project(p, geo.Camera(0.5, 0.1, 4500.0))
    assert np.abs(a - b).max() > 1e-3


@pytest.mark.parametrize("mode", ["orthographic", "perspective"])
def test_project_matches_homogeneous_oracle(rng, mode):
    for _ in range(50):
        p = random_pose(rng)
        az, el = rng.uniform(0, 2 * math.pi), rng.uniform(-0.5, 0.5)
        dist = rng.uniform(3000, 6000)
        focal = rng.uniform(20, 80) if mode == "perspective" else None
        cam = geo.Camera(az, el, dist, mode, focal)
        expected = homogeneous_project(p, az, el, dist, mode, focal)
        np.testing.assert_allclose(geo.project(p, cam), expected, rtol=0, atol=1e-10)


def test_project_behind_camera_raises(rng):
    cam = geo.Camera(0.0, 0.0, 500.0)
    p = random_pose(rng)
    p[5] = [900.0, 0.0, 0.0]
    with pytest.raises(ProjectionError):
        geo.project(p, cam)


def test_camera_validation():
    with pytest.raises(InvalidArgumentError):
        geo.Camera(0.0, 0.0, 0.0)
    with pytest.raises(InvalidArgumentError):
        geo.Camera(0.0, 0.0, 10.0, "perspective", -1.0)
    with pytest.raises(InvalidArgumentError):
        geo.Camera(0.0, 0.0, 10.0, "fisheye")
