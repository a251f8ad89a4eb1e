from __future__ import annotations

import numpy as np

from supnerf.baselines import baseline_corners_pnp, baseline_mlp_direct
from supnerf.geometry import (
    BoxCorners2D,
    BoxDimensions,
    PoseO2C,
    Roi,
    project_box_corners,
    rot_x,
    rot_y,
    rotation_error,
    translation_error,
)
from supnerf.gradengine import Tensor
from supnerf.nets import DirectPoseHead
from supnerf.synthdata import frame_intrinsics

DIMS = BoxDimensions(h=1.5, w=1.8, l=4.0)
GT = PoseO2C(rot_y(0.3) @ rot_x(0.1), np.array([0.5, 0.2, 15.0]))
K = frame_intrinsics(DIMS, GT, 0.6)


def test_pnp_recovers_exact_corners():
    result = baseline_corners_pnp(project_box_corners(DIMS, GT, K), DIMS, K)
    pose = result.state.to_o2c(K)
    assert rotation_error(pose.rot, GT.rot) < 0.1
    assert translation_error(pose.t, GT.t) < 0.01
    assert result.final_error < 1e-3


def test_pnp_with_swapped_corners_cannot_fit():
    pts = project_box_corners(DIMS, GT, K).pts.copy()
    pts[[0, 7]] = pts[[7, 0]]
    result = baseline_corners_pnp(BoxCorners2D(pts), DIMS, K)
    assert result.divergent or result.final_error > 1.0


def test_mlp_direct_keeps_depth_positive(tiny_net, rng):
    head = DirectPoseHead(tiny_net, rng)
    roi = Roi(20.0, 30.0, 90.0, 100.0)
    for scale in (0.0, 1.0, 100.0):
        code = Tensor(scale * rng.normal(size=tiny_net.latent))
        state = baseline_mlp_direct(head, code, roi, 20.0)
        assert state.z > 0
        assert roi.x0 <= state.u <= roi.x1
        assert roi.y0 <= state.v <= roi.y1
