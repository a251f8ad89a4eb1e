"""Pose-module baselines: one-shot MLP regression and Corners+PnP."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from supnerf import gradengine as ge
from supnerf.constants import PROJECT_MIN_Z
from supnerf.geometry import (
    BoxCorners2D,
    BoxDimensions,
    CameraIntrinsics,
    PoseO2C,
    RotationSO3,
    Roi,
    exp_so3,
    hat,
)
from supnerf.gradengine import Tensor
from supnerf.nets import DirectPoseHead, RawPoseUpdate
from supnerf.pose import PoseState, PoseUpdate, apply_update

log = logging.getLogger(__name__)

_LOG_DEPTH_RANGE = 3.0
_DIVERGE_STREAK = 3


# ---------------------------------------------------------------------------
# MLP-direct
# ---------------------------------------------------------------------------


def direct_base_state(roi: Roi, init_depth: float) -> PoseState:
    """Canonical state the direct head's output is measured from."""
    return PoseState(RotationSO3.identity(), roi.x0, roi.y0, init_depth)


def direct_raw_update(head: DirectPoseHead, pose_code: Tensor, roi: Roi) -> RawPoseUpdate:
    """Map the head's 6 outputs to (q, center inside the roi, bounded log depth)."""
    out = head(pose_code)
    dq = math.pi * ge.tanh(out[0:3])
    shift = ge.sigmoid(out[3:5]) * np.array([roi.width, roi.height])
    log_rho = _LOG_DEPTH_RANGE * ge.tanh(out[5:6] / _LOG_DEPTH_RANGE)
    return RawPoseUpdate(dq, shift, log_rho)


def baseline_mlp_direct(
    head: DirectPoseHead, pose_code: Tensor, roi: Roi, init_depth: float
) -> PoseState:
    """Regress (q, u, v, log Z) in one shot; Z = init_depth · exp(bounded raw) > 0."""
    raw = direct_raw_update(head, pose_code, roi)
    return apply_update(direct_base_state(roi, init_depth), PoseUpdate.from_raw(raw))


# ---------------------------------------------------------------------------
# Corners + PnP
# ---------------------------------------------------------------------------


@dataclass
class PnPResult:
    state: PoseState
    divergent: bool
    errors: list[float] = field(default_factory=lambda: [])

    @property
    def final_error(self) -> float:
        return self.errors[-1] if self.errors else math.nan


def _reprojection(
    rot: np.ndarray, t: np.ndarray, pts: np.ndarray, k: CameraIntrinsics
) -> tuple[np.ndarray, np.ndarray]:
    """Projected (8, 2) points and their camera-frame coordinates."""
    x_c = pts @ rot.T + t
    z = x_c[:, 2]
    uv = np.stack([k.fx * x_c[:, 0] / z + k.cx, k.fy * x_c[:, 1] / z + k.cy], axis=1)
    return uv, x_c


def _jacobian(x_c: np.ndarray, rotated: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    """d(uv)/d(ω, T) for a left rotation perturbation exp(ω) R; shape (16, 6).

    `rotated` holds R X, the camera-frame points without the translation.
    """
    rows = []
    for (x, y, z), rx in zip(x_c, rotated, strict=True):
        d_proj = np.array([[k.fx / z, 0.0, -k.fx * x / z**2], [0.0, k.fy / z, -k.fy * y / z**2]])
        rows.append(np.hstack([d_proj @ -hat(rx), d_proj]))
    return np.vstack(rows)


def baseline_corners_pnp(
    corners: BoxCorners2D,
    dims: BoxDimensions,
    k: CameraIntrinsics,
    iterations: int = 20,
    init_depth: float = 20.0,
) -> PnPResult:
    """Gauss-Newton reprojection fit of (R, T) to the 8 box-corner correspondences.

    Starts from R = I and T = init_depth · K⁻¹(mean corner). The fit is flagged
    divergent when the mean reprojection error grows on three consecutive
    iterations or the box falls behind the camera; the last valid iterate is
    returned either way.
    """
    target = corners.pts
    pts = dims.corners()
    rot = np.eye(3)
    center = target.mean(axis=0)
    t = init_depth * k.backproject(center[0], center[1])

    uv, x_c = _reprojection(rot, t, pts, k)
    errors = [float(np.mean(np.linalg.norm(uv - target, axis=1)))]
    divergent = False
    streak = 0
    for _ in range(iterations):
        residual = (uv - target).reshape(-1)
        step, *_ = np.linalg.lstsq(_jacobian(x_c, x_c - t, k), -residual, rcond=None)
        new_rot = exp_so3(step[:3]).m @ rot
        new_t = t + step[3:]
        new_uv, new_x = _reprojection(new_rot, new_t, pts, k)
        if np.any(new_x[:, 2] <= PROJECT_MIN_Z) or not np.all(np.isfinite(new_uv)):
            divergent = True
            break
        rot, t, uv, x_c = new_rot, new_t, new_uv, new_x
        errors.append(float(np.mean(np.linalg.norm(uv - target, axis=1))))
        streak = streak + 1 if errors[-1] > errors[-2] else 0
        if streak >= _DIVERGE_STREAK:
            divergent = True
            break

    state = PoseState.from_o2c(PoseO2C(RotationSO3(_orthonormalize(rot)), t), k)
    if divergent:
        log.debug("PnP diverged after %d iterations (error %.2f px)", len(errors) - 1, errors[-1])
    return PnPResult(state=state, divergent=divergent, errors=errors)


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m)
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    return r
