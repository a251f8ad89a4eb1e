"""Feed-forward refinement: pose states, updates and the refiner loop."""

from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.stats import chisquare

from supnerf.geometry import (
    BoxCorners2D,
    BoxDimensions,
    CameraIntrinsics,
    PoseO2C,
    Roi,
    project_box_corners,
    rot_y,
)
from supnerf.gradengine import Tensor
from supnerf.nets import PoseRefinerNet
from supnerf.pose import (
    PoseState,
    PoseUpdate,
    apply_update,
    corners_after_update,
    encode_box,
    guarded_corners,
    predict_update,
    refine,
    refine_step,
    sample_initial_pose,
)
from supnerf.settings import RefinerConfig

K = CameraIntrinsics(fx=300.0, fy=300.0, cx=64.0, cy=64.0, width=128, height=128)
DIMS = BoxDimensions(h=1.5, w=1.8, l=4.0)
ROI = Roi(30.0, 40.0, 100.0, 90.0)


@pytest.fixture
def net(tiny_net) -> PoseRefinerNet:
    return PoseRefinerNet(tiny_net, RefinerConfig(), np.random.default_rng(5))


@pytest.fixture
def code(tiny_net, rng) -> Tensor:
    return Tensor(rng.normal(size=tiny_net.latent))


def state_at(u: float = 64.0, v: float = 64.0, z: float = 20.0, yaw: float = 0.4) -> PoseState:
    return PoseState(rot_y(yaw), u, v, z)


# ---------------------------------------------------------------------------
# States and updates
# ---------------------------------------------------------------------------


def test_state_round_trips_through_o2c():
    pose = PoseO2C(rot_y(0.3), np.array([1.0, -0.5, 12.0]))
    back = PoseState.from_o2c(pose, K).to_o2c(K)
    np.testing.assert_allclose(back.t, pose.t, atol=1e-9)


def test_zero_update_is_identity():
    s = state_at()
    out = apply_update(s, PoseUpdate.zero())
    assert (out.u, out.v, out.z) == (s.u, s.v, s.z)
    np.testing.assert_array_equal(out.rot.m, s.rot.m)


def test_update_arithmetic():
    out = apply_update(state_at(), PoseUpdate(np.zeros(3), 3.0, -2.0, 0.5))
    assert (out.u, out.v, out.z) == (67.0, 62.0, 10.0)


def test_update_then_inverse_restores_rotation():
    s = state_at()
    dq = np.array([0.1, -0.2, 0.05])
    there = apply_update(s, PoseUpdate(dq, 0.0, 0.0, 1.0))
    back = apply_update(there, PoseUpdate(-dq, 0.0, 0.0, 1.0))
    np.testing.assert_allclose(back.rot.m, s.rot.m, atol=1e-9)


def test_update_ignores_intrinsics():
    """(u, v, Z) updates live in image space; only the translation depends on K."""
    s = state_at()
    update = PoseUpdate(np.array([0.0, 0.1, 0.0]), 4.0, -3.0, 1.5)
    k2 = CameraIntrinsics(fx=150.0, fy=150.0, cx=60.0, cy=70.0, width=128, height=128)
    out = apply_update(s, update)
    assert (out.u, out.v, out.z) == (68.0, 61.0, 30.0)
    assert not np.allclose(out.translation(K), out.translation(k2))


def test_network_update_ignores_intrinsics(net, code):
    """Same roi-normalized corners under two cameras give the same update, bit for bit."""
    pose = PoseO2C(rot_y(0.4), np.array([0.5, 0.2, 20.0]))
    k2 = CameraIntrinsics(fx=600.0, fy=600.0, cx=128.0, cy=128.0, width=256, height=256)
    c1 = project_box_corners(DIMS, pose, K)
    c2 = project_box_corners(DIMS, pose, k2)
    roi1, roi2 = Roi.bounding(c1.pts), Roi.bounding(c2.pts)
    np.testing.assert_array_equal(roi1.normalize(c1.pts), roi2.normalize(c2.pts))

    a = predict_update(net, code, c1, roi1)
    b = predict_update(net, code, c2, roi2)
    np.testing.assert_array_equal(a.dq.data, b.dq.data)
    np.testing.assert_array_equal(a.shift.data, b.shift.data)
    np.testing.assert_array_equal(a.log_rho.data, b.log_rho.data)


def test_depth_ratio_is_clamped(tiny_net, code):
    tight = RefinerConfig(log_rho_max=0.05)
    net = PoseRefinerNet(tiny_net, tight, np.random.default_rng(5))
    net.depth_head.bias.data = np.array([10.0])
    corners = guarded_corners(DIMS, state_at(), K)
    raw = predict_update(net, code, corners, ROI)
    assert raw.log_rho.item() == 0.05


def test_invalid_depth_ratio():
    with pytest.raises(ValueError):
        PoseUpdate(np.zeros(3), 0.0, 0.0, 0.0)


# ---------------------------------------------------------------------------
# Initial pose
# ---------------------------------------------------------------------------


def test_initial_pose_fixed_depth_and_inside_roi():
    rng = np.random.default_rng(0)
    cfg = RefinerConfig()
    for _ in range(10_000):
        s = sample_initial_pose(ROI, K, rng, cfg)
        assert s.z == 20.0
        assert ROI.x0 <= s.u <= ROI.x1
        assert ROI.y0 <= s.v <= ROI.y1


def test_initial_yaw_is_uniform():
    rng = np.random.default_rng(0)
    cfg = RefinerConfig()
    headings = []
    for _ in range(36_000):
        forward = sample_initial_pose(ROI, K, rng, cfg).rot.m[:, 0]
        headings.append(math.atan2(forward[2], forward[0]))
    counts, _ = np.histogram(headings, bins=36, range=(-math.pi, math.pi))
    assert chisquare(counts).pvalue > 0.01


def test_initial_pose_rejects_empty_roi():
    with pytest.raises(ValueError):
        empty = Roi(10.0, 10.0, 10.0, 20.0)
        sample_initial_pose(empty, K, np.random.default_rng(0), RefinerConfig())


# ---------------------------------------------------------------------------
# Corners
# ---------------------------------------------------------------------------


def test_guarded_corners_match_projection_in_front():
    s = state_at()
    np.testing.assert_allclose(
        guarded_corners(DIMS, s, K).pts, project_box_corners(DIMS, s.to_o2c(K), K).pts, atol=1e-9
    )


def test_guarded_corners_finite_when_box_straddles_camera():
    corners = guarded_corners(DIMS, state_at(z=1.0, yaw=0.0), K)
    assert np.all(np.isfinite(corners.pts))


def test_differentiable_corners_match_applied_update(net, code):
    s = state_at()
    corners = guarded_corners(DIMS, s, K)
    raw = predict_update(net, code, corners, ROI)
    moved = apply_update(s, PoseUpdate.from_raw(raw))
    np.testing.assert_allclose(
        corners_after_update(s, raw, DIMS, K).data, guarded_corners(DIMS, moved, K).pts, atol=1e-9
    )


def test_box_code_sensitivity(tiny_net):
    wide = tiny_net.model_copy(update={"box_hidden": 64})
    net = PoseRefinerNet(wide, RefinerConfig(), np.random.default_rng(5))
    corners = guarded_corners(DIMS, state_at(), K)
    base = encode_box(net, corners, ROI).data
    np.testing.assert_array_equal(encode_box(net, corners, ROI).data, base)
    for i in range(8):
        moved = corners.pts.copy()
        moved[i, 0] += 1.0
        assert not np.array_equal(encode_box(net, BoxCorners2D(moved), ROI).data, base)


def test_box_code_finite_outside_roi(net):
    far = BoxCorners2D(np.full((8, 2), 500.0) + np.arange(16).reshape(8, 2))
    assert np.all(np.isfinite(encode_box(net, far, ROI).data))


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------


def test_single_iteration_equals_one_step(net, code):
    s = state_at()
    traj = refine(net, s, code, DIMS, K, ROI, 1)
    step = refine_step(net, s, code, DIMS, K, ROI)
    assert len(traj.states) == 2
    assert len(traj.corners) == 1
    assert (traj.final.u, traj.final.v, traj.final.z) == (step.state.u, step.state.v, step.state.z)
    np.testing.assert_array_equal(traj.final.rot.m, step.state.rot.m)


def test_untrained_refiner_keeps_poses_valid(net, code):
    traj = refine(net, state_at(), code, DIMS, K, ROI, 5)
    assert len(traj.states) == 6
    for s in traj.states:
        assert s.z > 0
        assert math.isfinite(s.u) and math.isfinite(s.v)
    assert all(d == DIMS for d in traj.dims_seen)


def test_refine_needs_an_iteration(net, code):
    with pytest.raises(ValueError):
        refine(net, state_at(), code, DIMS, K, ROI, 0)
