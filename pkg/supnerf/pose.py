"""Iterative feed-forward pose refinement.

The refiner's iterate is a PoseState (R, u, v, Z): rotation, the pixel where
the object center projects, and its depth. Each step projects the box,
encodes the roi-normalized corners, predicts a relative update and applies

    u' = u + v_x,  v' = v + v_y,  Z' = ρ Z,  R' = exp(Δq) R

so translation is updated in image space and never needs the intrinsics.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import ArrayLike

from supnerf import gradengine as ge
from supnerf.constants import MIN_CORNER_DEPTH
from supnerf.errors import InvalidArgumentError
from supnerf.geometry import (
    Array,
    BoxCorners2D,
    BoxDimensions,
    CameraIntrinsics,
    PoseO2C,
    RotationSO3,
    Roi,
    exp_so3,
    exp_so3_tensor,
    project,
    random_unit_vector,
    rot_y,
)
from supnerf.gradengine import Tensor
from supnerf.nets import PoseRefinerNet, RawPoseUpdate
from supnerf.settings import RefinerConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class PoseState:
    rot: RotationSO3
    u: float
    v: float
    z: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise InvalidArgumentError("pose state center must be finite")
        if not (math.isfinite(self.z) and self.z > 0):
            raise InvalidArgumentError(f"pose state depth must be positive, got {self.z}")

    def translation(self, k: CameraIntrinsics) -> Array:
        """T = Z · K⁻¹(u, v, 1)."""
        return self.z * k.backproject(self.u, self.v)

    def to_o2c(self, k: CameraIntrinsics) -> PoseO2C:
        return PoseO2C(self.rot, self.translation(k))

    @classmethod
    def from_o2c(cls, pose: PoseO2C, k: CameraIntrinsics) -> PoseState:
        u, v = project(k, pose.t)
        return cls(pose.rot, u, v, float(pose.t[2]))


@dataclass(frozen=True, eq=False)
class PoseUpdate:
    dq: Array
    vx: float
    vy: float
    rho: float

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise InvalidArgumentError(f"depth ratio must be positive, got {self.rho}")

    @classmethod
    def zero(cls) -> PoseUpdate:
        return cls(np.zeros(3), 0.0, 0.0, 1.0)

    @classmethod
    def from_raw(cls, raw: RawPoseUpdate) -> PoseUpdate:
        return cls(
            raw.dq.numpy(),
            float(raw.shift.data[0]),
            float(raw.shift.data[1]),
            math.exp(float(raw.log_rho.data[0])),
        )


def apply_update(state: PoseState, update: PoseUpdate) -> PoseState:
    return PoseState(
        rot=exp_so3(update.dq) @ state.rot,
        u=state.u + update.vx,
        v=state.v + update.vy,
        z=update.rho * state.z,
    )


# ---------------------------------------------------------------------------
# Initial pose
# ---------------------------------------------------------------------------


def sample_initial_pose(
    roi: Roi, k: CameraIntrinsics, rng: np.random.Generator, cfg: RefinerConfig
) -> PoseState:
    """Center uniform in the roi at a fixed depth; uniform yaw plus a bounded random tilt."""
    if roi.is_empty:
        raise InvalidArgumentError(f"cannot sample a pose in empty roi {roi.as_tuple()}")
    u = float(rng.uniform(roi.x0, roi.x1))
    v = float(rng.uniform(roi.y0, roi.y1))
    yaw = float(rng.uniform(0.0, 2.0 * math.pi))
    axis = random_unit_vector(rng)
    angle = float(rng.uniform(-cfg.rot_perturb_max, cfg.rot_perturb_max))
    rot = rot_y(yaw) @ exp_so3(axis * angle)
    return PoseState(rot, u, v, cfg.init_depth)


# ---------------------------------------------------------------------------
# Projected box
# ---------------------------------------------------------------------------


def guarded_corners(dims: BoxDimensions, state: PoseState, k: CameraIntrinsics) -> BoxCorners2D:
    """Project the box with every corner depth floored at MIN_CORNER_DEPTH."""
    x_c = state.rot.apply(dims.corners()) + state.translation(k)
    z = np.maximum(x_c[:, 2], MIN_CORNER_DEPTH)
    u = k.fx * x_c[:, 0] / z + k.cx
    v = k.fy * x_c[:, 1] / z + k.cy
    return BoxCorners2D(np.stack([u, v], axis=1))


def corners_after_update(
    state: PoseState, raw: RawPoseUpdate, dims: BoxDimensions, k: CameraIntrinsics
) -> Tensor:
    """Differentiable (8, 2) projection of `state` moved by a raw network update."""
    rot = exp_so3_tensor(raw.dq) @ Tensor(state.rot.m)
    uv = Tensor([state.u, state.v]) + raw.shift
    xy = (uv - np.array([k.cx, k.cy])) / np.array([k.fx, k.fy])
    t = ge.concat([xy, Tensor([1.0])]) * (state.z * ge.exp(raw.log_rho))
    x_c = Tensor(dims.corners()) @ rot.T + t
    z = ge.clip(x_c[:, 2], lo=MIN_CORNER_DEPTH).reshape(8, 1)
    return x_c[:, 0:2] / z * np.array([k.fx, k.fy]) + np.array([k.cx, k.cy])


def encode_box(net: PoseRefinerNet, corners: BoxCorners2D, roi: Roi) -> Tensor:
    """Box code from roi-relative corners; no clamping to the roi."""
    return net.encode_box(roi.normalize(corners.pts))


def predict_update(
    net: PoseRefinerNet, pose_code: Tensor, corners: BoxCorners2D, roi: Roi
) -> RawPoseUpdate:
    """Network update from the pose code and the roi-normalized corners only."""
    return net(pose_code, roi.normalize(corners.pts))


# ---------------------------------------------------------------------------
# Refinement
# ---------------------------------------------------------------------------


@dataclass
class StepResult:
    state: PoseState
    corners: BoxCorners2D  # projected from the input state
    update: PoseUpdate
    raw: RawPoseUpdate


def refine_step(
    net: PoseRefinerNet,
    state: PoseState,
    pose_code: Tensor,
    dims: BoxDimensions,
    k: CameraIntrinsics,
    roi: Roi,
) -> StepResult:
    corners = guarded_corners(dims, state, k)
    raw = predict_update(net, pose_code, corners, roi)
    update = PoseUpdate.from_raw(raw)
    return StepResult(apply_update(state, update), corners, update, raw)


@dataclass
class Trajectory:
    states: list[PoseState]
    corners: list[BoxCorners2D]
    updates: list[PoseUpdate] = field(default_factory=lambda: [])
    dims_seen: list[BoxDimensions] = field(default_factory=lambda: [])

    @property
    def final(self) -> PoseState:
        return self.states[-1]


def refine(
    net: PoseRefinerNet,
    state0: PoseState,
    pose_code: ArrayLike | Tensor,
    dims: BoxDimensions,
    k: CameraIntrinsics,
    roi: Roi,
    iterations: int,
) -> Trajectory:
    """Run `iterations` refine steps; the pose code is computed once and reused."""
    if iterations < 1:
        raise InvalidArgumentError(f"refine needs at least one iteration, got {iterations}")
    code = pose_code.detach() if isinstance(pose_code, Tensor) else Tensor(pose_code)
    traj = Trajectory(states=[state0], corners=[])
    for _ in range(iterations):
        step = refine_step(net, traj.final, code, dims, k, roi)
        traj.states.append(step.state)
        traj.corners.append(step.corners)
        traj.updates.append(step.update)
        traj.dims_seen.append(dims)
    return traj
