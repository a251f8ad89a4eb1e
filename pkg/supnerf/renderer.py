"""Differentiable volumetric rendering of an object field.

Rays are cast from the camera through patch-pixel centers, expressed in the
object frame, normalized by the box diagonal and clipped to the box. Samples
along the clipped segment are composited front to back:

    α_i = 1 - exp(-σ_i δ_i),   T_i = exp(-Σ_{j<i} σ_j δ_j),   w_i = T_i α_i

Everything downstream of the camera pose is recorded on the active tape, so
pose parameters receive gradients (see RelativeO2CPose and C2OPose).
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from numpy.typing import ArrayLike, NDArray

from supnerf import gradengine as ge
from supnerf.constants import OCCUPANCY_FLOOR, PROJECT_MIN_Z, SIGMA_MAX
from supnerf.errors import BehindCameraError, InvalidArgumentError
from supnerf.geometry import (
    BoxDimensions,
    CameraIntrinsics,
    PoseC2O,
    PoseO2C,
    c2o_to_o2c,
    clip_rays,
    exp_so3,
    exp_so3_tensor,
    log_so3,
    o2c_to_c2o,
    pixel_directions,
)
from supnerf.gradengine import Parameter, Tensor
from supnerf.nets import Field
from supnerf.pose import PoseState
from supnerf.settings import PoseFrame, RenderConfig

log = logging.getLogger(__name__)


@dataclass
class RenderOutput:
    rgb: Tensor  # (P, P, 3)
    occupancy: Tensor  # (P, P)
    depth: Tensor  # (P, P) camera-frame Z in meters, 0 where missed
    residual: Tensor  # (P, P) transmittance left after the last sample
    hit: NDArray[np.bool_]  # (P, P)


@dataclass
class Composite:
    rgb: Tensor  # (M, 3)
    occupancy: Tensor  # (M,)
    depth_t: Tensor  # (M,) expected termination distance along the ray
    residual: Tensor  # (M,)


def patch_pixel_centers(cfg: RenderConfig) -> tuple[np.ndarray, np.ndarray]:
    """Input-image coordinates of every patch pixel, row-major, each shape (P·P,)."""
    centers = cfg.stride * np.arange(cfg.patch) + cfg.stride / 2.0
    v, u = np.meshgrid(centers, centers, indexing="ij")
    return u.reshape(-1), v.reshape(-1)


def sample_fractions(m: int, n: int, rng: np.random.Generator | None) -> np.ndarray:
    """Positions in [0, 1) of n samples per ray: bin midpoints, or jittered within bins."""
    offsets = np.full((m, n), 0.5) if rng is None else rng.uniform(size=(m, n))
    return (np.arange(n) + offsets) / n


def composite(
    sigma: Tensor, colors: Tensor, t: Tensor, delta: Tensor, background: ArrayLike
) -> Composite:
    """Alpha-composite (M, S) samples front to back."""
    m, s = sigma.shape
    tau = sigma * delta
    alpha = 1.0 - ge.exp(-tau)
    acc = ge.cumsum(tau, axis=1)
    weights = ge.exp(tau - acc) * alpha
    occupancy = weights.sum(axis=1)
    residual = ge.exp(-acc[:, s - 1])
    bg = np.asarray(background, dtype=np.float64)
    rgb = (weights.reshape(m, s, 1) * colors).sum(axis=1) + residual.reshape(m, 1) * bg
    depth_t = (weights * t).sum(axis=1) / ge.clip(occupancy, lo=OCCUPANCY_FLOOR)
    return Composite(rgb, occupancy, depth_t, residual)


def _scatter(
    hit_vals: Tensor, fill: np.ndarray, hit_idx: np.ndarray, miss_idx: np.ndarray
) -> Tensor:
    """Interleave per-hit values with a constant fill for missed pixels."""
    miss = Tensor(np.broadcast_to(fill, (miss_idx.size, *fill.shape)).copy())
    combined = ge.concat([hit_vals, miss], axis=0)
    inverse = np.argsort(np.concatenate([hit_idx, miss_idx]), kind="stable")
    return combined[inverse]


def render_patch(
    rot_c2o: Tensor | ArrayLike,
    t_c2o: Tensor | ArrayLike,
    dims: BoxDimensions,
    k: CameraIntrinsics,
    field: Field,
    cfg: RenderConfig,
    log_scale: Tensor | None = None,
    rng: np.random.Generator | None = None,
) -> RenderOutput:
    """Render a P×P patch of `field` seen from the camera pose (R_c2o, T_c2o).

    `log_scale` multiplies the normalization diagonal by exp(log_scale) (free-scale
    ablation). `rng` switches from midpoint to stratified sampling.
    """
    rot_c2o, t_c2o = ge.lift(rot_c2o), ge.lift(t_c2o)
    center_z = -float(rot_c2o.data[:, 2] @ t_c2o.data)
    if center_z <= PROJECT_MIN_Z:
        raise BehindCameraError(f"object center at z={center_z:.3g} is behind the camera")

    p, n_samples = cfg.patch, cfg.samples_per_ray
    bg = np.asarray(cfg.background, dtype=np.float64)
    u, v = patch_pixel_centers(cfg)
    d_cam = pixel_directions(k, u, v)
    dirs = Tensor(d_cam) @ rot_c2o.T
    diag: float | Tensor = dims.diagonal if log_scale is None else dims.diagonal * ge.exp(log_scale)
    origin = t_c2o / diag
    half = dims.half_extents / dims.diagonal

    hits = clip_rays(origin.data, dirs.data, half)
    hit_idx = np.flatnonzero(hits.hit)
    miss_idx = np.flatnonzero(~hits.hit)
    m = hit_idx.size

    if m == 0:
        return RenderOutput(
            rgb=Tensor(np.broadcast_to(bg, (p, p, 3)).copy()),
            occupancy=Tensor(np.zeros((p, p))),
            depth=Tensor(np.zeros((p, p))),
            residual=Tensor(np.ones((p, p))),
            hit=np.zeros((p, p), dtype=bool),
        )

    rows = np.arange(m)
    d_hit = dirs[hit_idx]
    near_axis, far_axis = hits.near_axis[hit_idx], hits.far_axis[hit_idx]
    t_near = (hits.near_bound[hit_idx] - origin[near_axis]) / d_hit[rows, near_axis]
    t_near = t_near * (hits.t_near[hit_idx] > 0.0)  # camera inside the box starts at 0
    t_far = (hits.far_bound[hit_idx] - origin[far_axis]) / d_hit[rows, far_axis]

    frac = sample_fractions(m, n_samples, rng)
    t = t_near.reshape(m, 1) + (t_far - t_near).reshape(m, 1) * frac
    delta = ge.concat([t[:, 1:], t_far.reshape(m, 1)], axis=1) - t
    pts = origin.reshape(1, 1, 3) + t.reshape(m, n_samples, 1) * d_hit.reshape(m, 1, 3)

    sigma, colors = field(pts.reshape(m * n_samples, 3))
    sigma = ge.clip(sigma, lo=0.0, hi=SIGMA_MAX).reshape(m, n_samples)
    comp = composite(sigma, colors.reshape(m, n_samples, 3), t, delta, bg)
    depth = comp.depth_t * diag * d_cam[hit_idx, 2]

    return RenderOutput(
        rgb=_scatter(comp.rgb, bg, hit_idx, miss_idx).reshape(p, p, 3),
        occupancy=_scatter(comp.occupancy, np.zeros(()), hit_idx, miss_idx).reshape(p, p),
        depth=_scatter(depth, np.zeros(()), hit_idx, miss_idx).reshape(p, p),
        residual=_scatter(comp.residual, np.ones(()), hit_idx, miss_idx).reshape(p, p),
        hit=hits.hit.reshape(p, p),
    )


def render_pose(
    pose: PoseO2C, dims: BoxDimensions, k: CameraIntrinsics, field: Field, cfg: RenderConfig
) -> RenderOutput:
    """Render at a fixed (non-optimized) object pose."""
    c2o = o2c_to_c2o(pose)
    return render_patch(c2o.rot.m, c2o.t, dims, k, field, cfg)


# ---------------------------------------------------------------------------
# Pose parameterizations for gradient-based refinement
# ---------------------------------------------------------------------------


class PoseParameterization(Protocol):
    def parameters(self) -> list[Parameter]: ...

    def camera(self) -> tuple[Tensor, Tensor]: ...

    def commit(self) -> None: ...

    def pose_o2c(self) -> PoseO2C: ...


class RelativeO2CPose:
    """Deltas (Δq, Δu, Δv, Δlog ρ) about the current object pose, re-zeroed on commit.

    R = exp(Δq) R₀, (u, v) = (u₀ + Δu, v₀ + Δv), Z = Z₀ exp(Δlog ρ).
    """

    def __init__(self, state: PoseState, k: CameraIntrinsics):
        self.state = state
        self.k = k
        self.dq = Parameter(np.zeros(3), name="pose.dq")
        self.duv = Parameter(np.zeros(2), name="pose.duv")
        self.dlog_rho = Parameter(np.zeros(1), name="pose.dlog_rho")

    def parameters(self) -> list[Parameter]:
        return [self.dq, self.duv, self.dlog_rho]

    def camera(self) -> tuple[Tensor, Tensor]:
        k = self.k
        rot_o2c = exp_so3_tensor(self.dq) @ Tensor(self.state.rot.m)
        uv = Tensor([self.state.u, self.state.v]) + self.duv
        xy = (uv - np.array([k.cx, k.cy])) / np.array([k.fx, k.fy])
        t_o2c = ge.concat([xy, Tensor([1.0])]) * (self.state.z * ge.exp(self.dlog_rho))
        rot_c2o = rot_o2c.T
        return rot_c2o, -(rot_c2o @ t_o2c)

    def commit(self) -> None:
        self.state = PoseState(
            rot=exp_so3(self.dq.data) @ self.state.rot,
            u=self.state.u + float(self.duv.data[0]),
            v=self.state.v + float(self.duv.data[1]),
            z=self.state.z * math.exp(float(self.dlog_rho.data[0])),
        )
        for p in self.parameters():
            p.data = np.zeros_like(p.data)
            p.zero_grad()

    def pose_o2c(self) -> PoseO2C:
        return self.state.to_o2c(self.k)


class C2OPose:
    """Absolute camera-in-object parameters (q_c2o, T_c2o)."""

    def __init__(self, pose: PoseO2C):
        c2o = o2c_to_c2o(pose)
        self.q = Parameter(log_so3(c2o.rot), name="pose.q_c2o")
        self.t = Parameter(c2o.t, name="pose.t_c2o")

    def parameters(self) -> list[Parameter]:
        return [self.q, self.t]

    def camera(self) -> tuple[Tensor, Tensor]:
        return exp_so3_tensor(self.q), self.t

    def commit(self) -> None:
        # keep q canonical so the exp-map Jacobian stays well conditioned
        if float(np.linalg.norm(self.q.data)) > math.pi:
            self.q.data = log_so3(exp_so3(self.q.data))

    def pose_o2c(self) -> PoseO2C:
        return c2o_to_o2c(PoseC2O(exp_so3(self.q.data), self.t.data.copy()))


def make_pose_parameterization(
    frame: PoseFrame, pose: PoseO2C, k: CameraIntrinsics
) -> RelativeO2CPose | C2OPose:
    if frame == "o2c":
        return RelativeO2CPose(PoseState.from_o2c(pose, k), k)
    if frame == "c2o":
        return C2OPose(pose)
    raise InvalidArgumentError(f"unknown pose frame {frame!r}")
