"""Rigid-body math, pinhole projection and 3D box handling.

Conventions:
- Object frame: x along length, y along height (down when upright), z along width.
- O2C maps object points into the camera frame: X_c = R_o2c X_o + T_o2c.
- C2O is its inverse: R_c2o = R_o2cᵀ, T_c2o = -R_o2cᵀ T_o2c.
- Pixel j covers [j, j+1); principal point and projections use that continuous frame.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import TYPE_CHECKING

import numpy as np
from numpy.typing import ArrayLike, NDArray

from supnerf.constants import (
    NEAR_PI,
    ORTHONORMAL_SNAP,
    ORTHONORMAL_TOL,
    PROJECT_MIN_Z,
    SMALL_ANGLE,
)
from supnerf.errors import BehindCameraError, InvalidArgumentError

if TYPE_CHECKING:
    from supnerf.gradengine import Tensor

Array = NDArray[np.float64]
AxisAngle = Array

_PARALLEL_EPS = 1e-12


def _frozen(values: ArrayLike, shape: tuple[int, ...], what: str) -> Array:
    arr = np.array(values, dtype=np.float64)
    if arr.shape != shape:
        raise InvalidArgumentError(f"{what} must have shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgumentError(f"{what} must be finite")
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RotationSO3:
    """A 3×3 rotation matrix (row-major).

    Inputs within ORTHONORMAL_TOL of SO(3) are accepted; any drift beyond
    ORTHONORMAL_SNAP is removed by the nearest-rotation projection, so a stored
    matrix is orthonormal to within 1e-9.
    """

    m: Array

    def __post_init__(self) -> None:
        m = _frozen(self.m, (3, 3), "rotation")
        drift = np.max(np.abs(m.T @ m - np.eye(3)))
        if drift > ORTHONORMAL_TOL:
            raise InvalidArgumentError("rotation matrix is not orthonormal")
        if abs(np.linalg.det(m) - 1.0) > ORTHONORMAL_TOL:
            raise InvalidArgumentError("rotation matrix must have determinant +1")
        if drift > ORTHONORMAL_SNAP:
            u, _, vt = np.linalg.svd(m)
            m = _frozen(u @ vt, (3, 3), "rotation")
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> RotationSO3:
        return cls(np.eye(3))

    @property
    def T(self) -> RotationSO3:
        return RotationSO3(self.m.T)

    def __matmul__(self, other: RotationSO3) -> RotationSO3:
        return RotationSO3(self.m @ other.m)

    def apply(self, x: ArrayLike) -> Array:
        return np.asarray(x, dtype=np.float64) @ self.m.T


@dataclass(frozen=True, eq=False)
class PoseO2C:
    """Object pose in the camera frame."""

    rot: RotationSO3
    t: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "t", _frozen(self.t, (3,), "translation"))

    def matrix(self) -> Array:
        return np.hstack([self.rot.m, self.t[:, None]])


@dataclass(frozen=True, eq=False)
class PoseC2O:
    """Camera pose in the object frame."""

    rot: RotationSO3
    t: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "t", _frozen(self.t, (3,), "translation"))

    def matrix(self) -> Array:
        return np.hstack([self.rot.m, self.t[:, None]])


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self) -> None:
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidArgumentError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgumentError("principal point must lie inside the image")

    def matrix(self) -> Array:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def backproject(self, u: ArrayLike, v: ArrayLike) -> Array:
        """Un-normalized camera-frame directions K⁻¹(u, v, 1), shape (..., 3)."""
        u = np.asarray(u, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        x = (u - self.cx) / self.fx
        y = (v - self.cy) / self.fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def to_dict(self) -> dict[str, float]:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }


@dataclass(frozen=True)
class BoxDimensions:
    """Object box size in meters."""

    h: float
    w: float
    l: float  # noqa: E741

    def __post_init__(self) -> None:
        if not (self.h > 0 and self.w > 0 and self.l > 0):
            raise InvalidArgumentError("box dimensions must be strictly positive")

    @property
    def diagonal(self) -> float:
        return math.sqrt(self.h**2 + self.w**2 + self.l**2)

    @property
    def half_extents(self) -> Array:
        """Half sizes along the object x, y, z axes."""
        return np.array([self.l, self.h, self.w]) / 2.0

    def corners(self) -> Array:
        """The 8 object-frame corners; bit0 picks ±l/2, bit1 ±h/2, bit2 ±w/2."""
        half = self.half_extents
        idx = np.arange(8)
        signs = np.stack([(idx >> b) & 1 for b in range(3)], axis=1) * 2.0 - 1.0
        return signs * half

    def as_array(self) -> Array:
        return np.array([self.h, self.w, self.l])

    def scaled(self, factor: float) -> BoxDimensions:
        return BoxDimensions(self.h * factor, self.w * factor, self.l * factor)


@dataclass(frozen=True, eq=False)
class BoxCorners2D:
    """Projected box corners, shape (8, 2), in the fixed bit ordering."""

    pts: Array

    def __post_init__(self) -> None:
        object.__setattr__(self, "pts", _frozen(self.pts, (8, 2), "corners"))


@dataclass(frozen=True)
class Roi:
    """Axis-aligned pixel rectangle [x0, x1) × [y0, y1)."""

    x0: float
    y0: float
    x1: float
    y1: float

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    @property
    def is_empty(self) -> bool:
        return not (self.width > 0 and self.height > 0)

    @classmethod
    def bounding(cls, pts: ArrayLike) -> Roi:
        p = np.asarray(pts, dtype=np.float64)
        lo = p.min(axis=0)
        hi = p.max(axis=0)
        return cls(float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1]))

    def clipped(self, width: float, height: float) -> Roi:
        return Roi(
            max(self.x0, 0.0), max(self.y0, 0.0), min(self.x1, width), min(self.y1, height)
        )

    def normalize(self, pts: ArrayLike) -> Array:
        """Map pixel points into roi-relative [0, 1]² (no clamping)."""
        p = np.asarray(pts, dtype=np.float64)
        return (p - np.array([self.x0, self.y0])) / np.array([self.width, self.height])

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)


@dataclass(frozen=True, eq=False)
class Ray:
    origin: Array
    dir: Array
    t_near: float | None = None
    t_far: float | None = None


# ---------------------------------------------------------------------------
# SO(3)
# ---------------------------------------------------------------------------


def hat(q: ArrayLike) -> Array:
    x, y, z = np.asarray(q, dtype=np.float64)
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(s: Array) -> Array:
    return np.array([s[2, 1], s[0, 2], s[1, 0]])


def _exp_matrix(q: Array) -> Array:
    theta = float(np.linalg.norm(q))
    k = hat(q)
    if theta < SMALL_ANGLE:
        return np.eye(3) + k + 0.5 * (k @ k)
    a = math.sin(theta) / theta
    b = (1.0 - math.cos(theta)) / theta**2
    return np.eye(3) + a * k + b * (k @ k)


def exp_so3(q: ArrayLike) -> RotationSO3:
    """Rodrigues' formula; second-order Taylor expansion below 1e-8 rad."""
    arr = np.asarray(q, dtype=np.float64)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise InvalidArgumentError("axis-angle must be a finite 3-vector")
    return RotationSO3(_exp_matrix(arr))


def log_so3(r: RotationSO3 | ArrayLike) -> AxisAngle:
    """Canonical axis-angle with ‖q‖ in [0, π]."""
    m = r.m if isinstance(r, RotationSO3) else RotationSO3(np.asarray(r)).m
    v = vee(m - m.T)
    sin_theta = 0.5 * float(np.linalg.norm(v))
    cos_theta = 0.5 * (float(np.trace(m)) - 1.0)
    theta = math.atan2(sin_theta, cos_theta)

    if theta < SMALL_ANGLE:
        return 0.5 * v
    if math.pi - theta < NEAR_PI:
        # Axis from the symmetric part: (R + Rᵀ)/4 + I/2 ≈ a aᵀ near π.
        b = 0.25 * (m + m.T) + 0.5 * np.eye(3)
        i = int(np.argmax(np.diag(b)))
        axis = b[:, i] / math.sqrt(max(b[i, i], 1e-300))
        axis /= np.linalg.norm(axis)
        if float(axis @ v) < 0.0:
            axis = -axis
        return theta * axis
    return theta * v / (2.0 * sin_theta)


def rot_x(angle: float) -> RotationSO3:
    return exp_so3(np.array([angle, 0.0, 0.0]))


def rot_y(angle: float) -> RotationSO3:
    return exp_so3(np.array([0.0, angle, 0.0]))


def rot_z(angle: float) -> RotationSO3:
    return exp_so3(np.array([0.0, 0.0, angle]))


def random_unit_vector(rng: np.random.Generator) -> Array:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def _exp_jacobians(q: Array, r: Array) -> list[Array]:
    """∂R/∂q_k for k = 0..2."""
    theta = float(np.linalg.norm(q))
    basis = [hat(e) for e in np.eye(3)]
    if theta < 1e-4:
        k = hat(q)
        return [
            e + 0.5 * (e @ k + k @ e) + (e @ k @ k + k @ e @ k + k @ k @ e) / 6.0
            for e in basis
        ]
    eye = np.eye(3)
    qx = hat(q)
    out = []
    for idx in range(3):
        cross = np.cross(q, (eye - r)[:, idx])
        out.append((q[idx] * qx + hat(cross)) @ r / theta**2)
    return out


def exp_so3_tensor(q: Tensor) -> Tensor:
    """Differentiable exp map: (3,) tensor -> (3, 3) tensor."""
    from supnerf.gradengine import record_op

    qv = q.data
    if qv.shape != (3,):
        raise InvalidArgumentError("axis-angle tensor must have shape (3,)")
    r = _exp_matrix(qv)
    jac = _exp_jacobians(qv, r)

    def vjp(g: Array) -> tuple[Array]:
        return (np.array([float(np.sum(g * j)) for j in jac]),)

    return record_op("exp_so3", (q,), r, vjp)


# ---------------------------------------------------------------------------
# Frames
# ---------------------------------------------------------------------------


def o2c_to_c2o(p: PoseO2C) -> PoseC2O:
    rt = p.rot.m.T
    return PoseC2O(RotationSO3(rt), -rt @ p.t)


def c2o_to_o2c(p: PoseC2O) -> PoseO2C:
    rt = p.rot.m.T
    return PoseO2C(RotationSO3(rt), -rt @ p.t)


def transform_point(p: PoseO2C | PoseC2O, x: ArrayLike) -> Array:
    """R x + T for either frame direction; accepts (3,) or (N, 3)."""
    return np.asarray(x, dtype=np.float64) @ p.rot.m.T + p.t


# ---------------------------------------------------------------------------
# Projection
# ---------------------------------------------------------------------------


def project_points(k: CameraIntrinsics, x_c: ArrayLike) -> Array:
    """Pinhole projection of (N, 3) camera-frame points to (N, 2) pixels."""
    pts = np.atleast_2d(np.asarray(x_c, dtype=np.float64))
    z = pts[:, 2]
    if np.any(z <= PROJECT_MIN_Z):
        raise BehindCameraError(f"point with z={float(z.min()):.3g} is behind the camera")
    u = k.fx * pts[:, 0] / z + k.cx
    v = k.fy * pts[:, 1] / z + k.cy
    return np.stack([u, v], axis=1)


def project(k: CameraIntrinsics, x_c: ArrayLike) -> tuple[float, float]:
    uv = project_points(k, x_c)[0]
    return float(uv[0]), float(uv[1])


def project_box_corners(dims: BoxDimensions, pose: PoseO2C, k: CameraIntrinsics) -> BoxCorners2D:
    return BoxCorners2D(project_points(k, transform_point(pose, dims.corners())))


# ---------------------------------------------------------------------------
# Rays
# ---------------------------------------------------------------------------


def pixel_directions(k: CameraIntrinsics, u: ArrayLike, v: ArrayLike) -> Array:
    """Unit camera-frame ray directions through pixel positions, shape (..., 3)."""
    d = k.backproject(u, v)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def ray_through_pixel(k: CameraIntrinsics, u: float, v: float, pose_c2o: PoseC2O) -> Ray:
    """Ray in the object frame (meters) through pixel position (u, v)."""
    d_cam = pixel_directions(k, u, v)
    d = pose_c2o.rot.apply(d_cam)
    return Ray(origin=np.array(pose_c2o.t), dir=d / np.linalg.norm(d))


@dataclass(frozen=True)
class SlabHits:
    """Vectorized slab-test result for P rays.

    `near_axis`/`far_axis` index the entering/leaving slab and `near_bound`/
    `far_bound` hold that slab's plane coordinate, so t = (bound - o[axis]) / d[axis].
    """

    hit: NDArray[np.bool_]
    t_near: Array
    t_far: Array
    near_axis: NDArray[np.intp]
    far_axis: NDArray[np.intp]
    near_bound: Array
    far_bound: Array


def clip_rays(origins: ArrayLike, dirs: ArrayLike, half: ArrayLike) -> SlabHits:
    """Slab intersection of rays with the box [-half, half]."""
    d = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    o = np.broadcast_to(np.asarray(origins, dtype=np.float64), d.shape)
    h = np.asarray(half, dtype=np.float64)

    parallel = np.abs(d) < _PARALLEL_EPS
    safe_d = np.where(parallel, 1.0, d)
    t_lo_plane = (-h - o) / safe_d
    t_hi_plane = (h - o) / safe_d
    lo = np.minimum(t_lo_plane, t_hi_plane)
    hi = np.maximum(t_lo_plane, t_hi_plane)

    inside_slab = np.abs(o) <= h
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), hi)

    rows = np.arange(d.shape[0])
    near_axis = np.argmax(lo, axis=1)
    far_axis = np.argmin(hi, axis=1)
    t_near = lo[rows, near_axis]
    t_far = hi[rows, far_axis]
    hit = (t_near < t_far) & (t_far > 0.0)

    sign = np.sign(safe_d)
    near_bound = -sign[rows, near_axis] * h[near_axis]
    far_bound = sign[rows, far_axis] * h[far_axis]
    return SlabHits(hit, t_near, t_far, near_axis, far_axis, near_bound, far_bound)


def ray_box_clip(ray: Ray, dims: BoxDimensions) -> tuple[float, float] | None:
    """Clip a meter-space object-frame ray against the unit-diagonal normalized box.

    Returns (t_near, t_far) in normalized units along the ray, or None on a miss.
    """
    diag = dims.diagonal
    hits = clip_rays(ray.origin / diag, ray.dir, dims.half_extents / diag)
    if not hits.hit[0]:
        return None
    return float(hits.t_near[0]), float(hits.t_far[0])


# ---------------------------------------------------------------------------
# Errors
# ---------------------------------------------------------------------------


def rotation_error(a: RotationSO3, b: RotationSO3) -> float:
    """Geodesic angle between two rotations, degrees."""
    c = (float(np.trace(a.m @ b.m.T)) - 1.0) / 2.0
    return math.degrees(math.acos(min(1.0, max(-1.0, c))))


def translation_error(a: ArrayLike, b: ArrayLike) -> float:
    """Euclidean distance, meters."""
    return float(np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)))
