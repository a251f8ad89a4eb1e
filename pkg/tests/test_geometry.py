"""Rigid-body math, projection and ray clipping."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from supnerf.errors import BehindCameraError, InvalidArgumentError
from supnerf.geometry import (
    BoxDimensions,
    CameraIntrinsics,
    PoseC2O,
    PoseO2C,
    Ray,
    RotationSO3,
    c2o_to_o2c,
    clip_rays,
    exp_so3,
    log_so3,
    o2c_to_c2o,
    project,
    project_box_corners,
    ray_box_clip,
    ray_through_pixel,
    rot_y,
    rot_z,
    rotation_error,
    transform_point,
    translation_error,
)

K100 = CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0, width=128, height=128)


def random_rotvec(rng: np.random.Generator, max_angle: float = math.pi - 0.01) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return axis * rng.uniform(0.0, max_angle)


def random_pose(rng: np.random.Generator) -> PoseO2C:
    return PoseO2C(exp_so3(random_rotvec(rng)), rng.normal(scale=10.0, size=3))


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------


def test_exp_zero_is_identity():
    np.testing.assert_array_equal(exp_so3(np.zeros(3)).m, np.eye(3))


def test_exp_quarter_turn_about_z():
    r = exp_so3([0.0, 0.0, math.pi / 2])
    np.testing.assert_allclose(r.apply([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


def test_exp_matches_scipy(rng):
    for _ in range(20):
        q = random_rotvec(rng)
        np.testing.assert_allclose(exp_so3(q).m, Rotation.from_rotvec(q).as_matrix(), atol=1e-12)


def test_exp_log_round_trip(rng):
    for _ in range(100):
        r = exp_so3(random_rotvec(rng))
        np.testing.assert_allclose(exp_so3(log_so3(r)).m, r.m, atol=1e-9)


def test_log_identity_and_small_angle():
    np.testing.assert_array_equal(log_so3(RotationSO3.identity()), np.zeros(3))
    np.testing.assert_allclose(log_so3(exp_so3([0.2, 0.0, 0.0])), [0.2, 0.0, 0.0], atol=1e-9)
    tiny = np.array([1e-9, -2e-9, 3e-9])
    np.testing.assert_allclose(log_so3(exp_so3(tiny)), tiny, atol=1e-14)


def test_log_near_pi():
    axis = np.array([1.0, 2.0, -2.0]) / 3.0
    for angle in (math.pi - 1e-7, math.pi - 1e-4):
        r = exp_so3(axis * angle)
        q = log_so3(r)
        assert np.linalg.norm(q) <= math.pi + 1e-12
        np.testing.assert_allclose(exp_so3(q).m, r.m, atol=1e-9)


def test_log_of_transpose_is_negated(rng):
    for _ in range(20):
        r = exp_so3(random_rotvec(rng))
        np.testing.assert_allclose(log_so3(r.T), -log_so3(r), atol=1e-9)


def test_rotation_rejects_non_orthonormal():
    with pytest.raises(InvalidArgumentError):
        RotationSO3(np.diag([1.0, 1.0, 2.0]))
    with pytest.raises(InvalidArgumentError):
        RotationSO3(np.diag([1.0, 1.0, -1.0]))


def test_small_drift_is_projected_back_onto_so3(rng):
    base = exp_so3(random_rotvec(rng)).m
    drifted = RotationSO3(base + 2e-8 * rng.normal(size=(3, 3)))
    assert np.max(np.abs(drifted.m.T @ drifted.m - np.eye(3))) <= 1e-9
    np.testing.assert_allclose(drifted.m, base, atol=1e-6)


def test_long_composition_stays_orthonormal(rng):
    r = RotationSO3.identity()
    for _ in range(2000):
        r = exp_so3(random_rotvec(rng, max_angle=0.3)) @ r
    assert np.max(np.abs(r.m.T @ r.m - np.eye(3))) <= 1e-9


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


def test_pure_translation_inverse():
    c2o = o2c_to_c2o(PoseO2C(RotationSO3.identity(), np.array([0.0, 0.0, 10.0])))
    np.testing.assert_array_equal(c2o.rot.m, np.eye(3))
    np.testing.assert_allclose(c2o.t, [0.0, 0.0, -10.0])


def test_c2o_translation_by_hand():
    c2o = o2c_to_c2o(PoseO2C(rot_z(math.pi / 2), np.array([1.0, 0.0, 0.0])))
    np.testing.assert_allclose(c2o.t, [0.0, 1.0, 0.0], atol=1e-12)


def test_frame_involution(rng):
    for _ in range(1000):
        pose = random_pose(rng)
        back = c2o_to_o2c(o2c_to_c2o(pose))
        np.testing.assert_allclose(back.rot.m, pose.rot.m, atol=1e-12)
        np.testing.assert_allclose(back.t, pose.t, atol=1e-12)


def test_transform_point():
    x = np.array([1.0, 2.0, 3.0])
    identity = PoseO2C(RotationSO3.identity(), np.zeros(3))
    np.testing.assert_array_equal(transform_point(identity, x), x)
    shifted = transform_point(PoseO2C(RotationSO3.identity(), np.array([0.0, 0.0, 5.0])), x)
    np.testing.assert_allclose(shifted, [1.0, 2.0, 8.0])


def test_transform_point_inverse_consistency(rng):
    for _ in range(50):
        pose = random_pose(rng)
        x = rng.normal(size=3)
        back = transform_point(o2c_to_c2o(pose), transform_point(pose, x))
        np.testing.assert_allclose(back, x, atol=1e-9)


def test_small_rotation_error_amplified_in_camera_frame():
    """30° about the vertical axis at 20 m moves the camera center by 2·20·sin 15°."""
    t = np.array([0.0, 0.0, 20.0])
    gt = o2c_to_c2o(PoseO2C(RotationSO3.identity(), t))
    perturbed = o2c_to_c2o(PoseO2C(rot_y(math.radians(30.0)), t))
    assert translation_error(gt.t, perturbed.t) == pytest.approx(10.35, abs=0.01)


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def test_project_principal_ray_and_offset():
    assert project(K100, [0.0, 0.0, 10.0]) == pytest.approx((64.0, 64.0))
    assert project(K100, [1.0, 0.0, 10.0]) == pytest.approx((74.0, 64.0))


def test_project_doubling_depth_halves_offset():
    u1, v1 = project(K100, [1.0, -2.0, 10.0])
    u2, v2 = project(K100, [1.0, -2.0, 20.0])
    assert u2 - 64.0 == pytest.approx((u1 - 64.0) / 2)
    assert v2 - 64.0 == pytest.approx((v1 - 64.0) / 2)


def test_project_behind_camera():
    with pytest.raises(BehindCameraError):
        project(K100, [0.0, 0.0, -1.0])


def test_unit_cube_corners():
    cube = BoxDimensions(1.0, 1.0, 1.0)
    pose = PoseO2C(RotationSO3.identity(), np.array([0.0, 0.0, 10.0]))
    pts = project_box_corners(cube, pose, K100).pts
    offsets = np.abs(pts - 64.0)
    front = 100.0 * 0.5 / 9.5
    back = 100.0 * 0.5 / 10.5
    for corner, off in zip(cube.corners(), offsets, strict=True):
        expected = front if corner[2] < 0 else back
        np.testing.assert_allclose(off, [expected, expected])


def test_corner_spread_shrinks_with_depth():
    dims = BoxDimensions(1.5, 1.8, 4.0)
    spreads = []
    for z in (10.0, 15.0, 20.0):
        pts = project_box_corners(dims, PoseO2C(rot_y(0.4), np.array([0.0, 0.0, z])), K100).pts
        spreads.append(float(np.ptp(pts[:, 0])))
    assert spreads[0] > spreads[1] > spreads[2]


def test_quarter_turn_permutes_corners():
    cube = BoxDimensions(1.0, 1.0, 1.0)
    corners = cube.corners()
    turned = rot_y(math.pi / 2).apply(corners)
    perm = [int(np.argmin(np.linalg.norm(corners - c, axis=1))) for c in turned]
    assert sorted(perm) == list(range(8))
    np.testing.assert_allclose(corners[perm], turned, atol=1e-12)


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------


def test_principal_ray_clip_is_symmetric():
    dims = BoxDimensions(1.5, 1.8, 4.0)
    c2o = o2c_to_c2o(PoseO2C(RotationSO3.identity(), np.array([0.0, 0.0, 10.0])))
    ray = ray_through_pixel(K100, 64.0, 64.0, c2o)
    t_near, t_far = ray_box_clip(ray, dims)
    center = 10.0 / dims.diagonal
    assert (t_near + t_far) / 2 == pytest.approx(center)
    assert t_far - t_near == pytest.approx(dims.w / dims.diagonal)


def test_parallel_ray_outside_slab_misses():
    dims = BoxDimensions(1.5, 1.8, 4.0)
    ray = Ray(origin=np.array([0.0, 5.0, -10.0]), dir=np.array([0.0, 0.0, 1.0]))
    assert ray_box_clip(ray, dims) is None


def test_slab_matches_dense_marching(rng):
    half = np.array([0.4, 0.2, 0.3])
    steps = np.linspace(0.0, 4.0, 10_001)
    step = steps[1] - steps[0]
    for _ in range(50):
        origin = rng.normal(size=3)
        origin *= 2.0 / np.linalg.norm(origin)
        d = -origin + rng.normal(scale=0.3, size=3)
        d /= np.linalg.norm(d)
        hits = clip_rays(origin, d, half)
        inside = np.all(np.abs(origin + steps[:, None] * d) <= half, axis=1)
        if inside.any():
            assert hits.hit[0]
            assert abs(steps[inside][0] - hits.t_near[0]) <= step
            assert abs(steps[inside][-1] - hits.t_far[0]) <= step
        else:
            assert not hits.hit[0] or hits.t_far[0] - hits.t_near[0] <= step


def test_ray_through_pixel_is_unit_and_starts_at_camera():
    c2o = PoseC2O(rot_y(0.3), np.array([1.0, 2.0, 3.0]))
    ray = ray_through_pixel(K100, 10.0, 100.0, c2o)
    np.testing.assert_allclose(ray.origin, c2o.t)
    assert np.linalg.norm(ray.dir) == pytest.approx(1.0)


@pytest.mark.parametrize("uv", [(0.5, 0.5), (64.0, 64.0), (10.0, 100.0), (127.5, 3.25)])
@pytest.mark.parametrize("depth", [0.5, 7.0, 40.0])
def test_points_on_a_pixel_ray_project_back_to_it(uv, depth):
    c2o = PoseC2O(rot_y(0.3) @ rot_z(-0.2), np.array([1.0, 2.0, 3.0]))
    ray = ray_through_pixel(K100, uv[0], uv[1], c2o)
    x_o = ray.origin + depth * ray.dir
    u, v = project(K100, transform_point(c2o_to_o2c(c2o), x_o))
    assert u == pytest.approx(uv[0], abs=1e-6)
    assert v == pytest.approx(uv[1], abs=1e-6)


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


def test_rotation_and_translation_error():
    assert rotation_error(RotationSO3.identity(), RotationSO3.identity()) == 0.0
    assert rotation_error(rot_z(math.radians(30.0)), RotationSO3.identity()) == pytest.approx(30.0)
    assert translation_error([0.0, 0.0, 20.0], [0.0, 0.0, 21.0]) == pytest.approx(1.0)


def test_box_dimensions_must_be_positive():
    with pytest.raises(InvalidArgumentError):
        BoxDimensions(0.0, 1.0, 1.0)
