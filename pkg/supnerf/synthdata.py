"""Synthetic object observations and the on-disk dataset pack.

Each frame is a virtual roi crop: a 128×128 image whose principal point is the
image center and whose focal length makes the object's projected box fill
60-90 % of the frame. Shapes are rendered by sphere tracing their signed
distance functions, so depth and masks are exact.

Pack layout:
    manifest.json
    frames/<object>_<view>.{img,msk,dep}.supt
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterator
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Literal

import numpy as np
from pydantic import BaseModel, ValidationError
from rich.progress import track

from supnerf import __version__
from supnerf.constants import (
    IMAGE_SIZE,
    MANIFEST_VERSION,
    MASK_BACKGROUND,
    MASK_FOREGROUND,
    MASK_UNKNOWN,
    TOOL_NAME,
)
from supnerf.errors import (
    BehindCameraError,
    InvalidArgumentError,
    ManifestError,
    RecordError,
    TensorFileError,
)
from supnerf.geometry import (
    BoxCorners2D,
    BoxDimensions,
    CameraIntrinsics,
    PoseO2C,
    Roi,
    RotationSO3,
    clip_rays,
    o2c_to_c2o,
    pixel_directions,
    project_box_corners,
    rot_x,
    rot_y,
    rot_z,
    transform_point,
)
from supnerf.log import stderr_console
from supnerf.settings import ShapeFamily, SynthConfig
from supnerf.tensorio import read_tensor, write_tensor

log = logging.getLogger(__name__)

# Car-like size envelope, meters
DIMS_RANGE = {"h": (1.2, 2.2), "w": (1.5, 2.2), "l": (3.0, 5.5)}
EXPONENT_RANGE = (0.3, 1.0)
LATERAL_OFFSET = 0.05
BACKGROUND = 0.5

TRACE_TOLERANCE = 1e-5
TRACE_MAX_STEPS = 256
_BOUND_MARGIN = 1e-3
_NORMAL_EPS = 1e-4
_LIGHT = np.array([0.3, -1.0, 0.4]) / np.linalg.norm([0.3, -1.0, 0.4])
_AMBIENT = 0.35


# ---------------------------------------------------------------------------
# Scene description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Occluder:
    """Full-height screen-space bar covering `fraction` of the object's columns."""

    fraction: float
    side: Literal["left", "right"]
    color: tuple[float, float, float]


@dataclass(frozen=True, eq=False)
class SceneSpec:
    family: ShapeFamily
    dims: BoxDimensions
    pose: PoseO2C
    palette: np.ndarray  # (3, 3) RGB
    stripe_freq: float
    stripe_phase: float
    exponents: tuple[float, float] = (1.0, 1.0)
    occluder: Occluder | None = None


@dataclass(frozen=True, eq=False)
class OracleFrame:
    image: np.ndarray  # (H, W, 3)
    mask: np.ndarray  # (H, W) in {0, ½, 1}
    depth: np.ndarray  # (H, W), 0 = invalid


# ---------------------------------------------------------------------------
# Signed distances (object frame, meters)
# ---------------------------------------------------------------------------


def sd_box(p: np.ndarray, half: np.ndarray) -> np.ndarray:
    q = np.abs(p) - half
    return np.linalg.norm(np.maximum(q, 0.0), axis=-1) + np.minimum(np.max(q, axis=-1), 0.0)


def sd_round_box(p: np.ndarray, half: np.ndarray, radius: float) -> np.ndarray:
    return sd_box(p, half - radius) - radius


def sd_superellipsoid(p: np.ndarray, half: np.ndarray, e1: float, e2: float) -> np.ndarray:
    """Lower bound on the distance to a superellipsoid with exponents in (0, 1].

    The implicit function is a nested norm with powers ≥ 2, so it is
    1-Lipschitz in half-extent-scaled coordinates.
    """
    q = np.abs(p) / half
    xz = q[..., 0] ** (2.0 / e2) + q[..., 2] ** (2.0 / e2)
    f = (xz ** (e2 / e1) + q[..., 1] ** (2.0 / e1)) ** (e1 / 2.0)
    return (f - 1.0) * float(np.min(half))


def scene_sdf(spec: SceneSpec, p: np.ndarray) -> np.ndarray:
    half = spec.dims.half_extents
    if spec.family == "cuboid":
        return sd_box(p, half)
    if spec.family == "capped_cuboid":
        return sd_round_box(p, half, 0.35 * float(np.min(half)))
    return sd_superellipsoid(p, half, *spec.exponents)


def _normals(spec: SceneSpec, p: np.ndarray) -> np.ndarray:
    grads = []
    for axis in np.eye(3) * _NORMAL_EPS:
        grads.append(scene_sdf(spec, p + axis) - scene_sdf(spec, p - axis))
    n = np.stack(grads, axis=-1)
    return n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)


def _albedo(spec: SceneSpec, p: np.ndarray) -> np.ndarray:
    """Three-color stripes along the length with a sinusoidal wobble across the width."""
    half = spec.dims.half_extents
    x, z = p[:, 0] / half[0], p[:, 2] / half[2]
    band = spec.stripe_freq * x + spec.stripe_phase + 0.5 * np.sin(2.0 * math.pi * z)
    return spec.palette[np.floor(band).astype(np.int64) % 3]


# ---------------------------------------------------------------------------
# Oracle renderer
# ---------------------------------------------------------------------------


def sphere_trace(
    spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """March object-frame unit rays; returns (hit, t) with t in meters."""
    n = dirs.shape[0]
    bounds = clip_rays(origin, dirs, spec.dims.half_extents + _BOUND_MARGIN)
    t = np.maximum(bounds.t_near, 0.0)
    hit = np.zeros(n, dtype=bool)
    active = bounds.hit.copy()
    for _ in range(TRACE_MAX_STEPS):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        dist = scene_sdf(spec, origin + t[idx, None] * dirs[idx])
        done = dist < TRACE_TOLERANCE
        hit[idx[done]] = True
        active[idx[done]] = False
        moving = idx[~done]
        t[moving] += dist[~done]
        active[moving] = t[moving] <= bounds.t_far[moving]
    return hit, t


def oracle_render(
    spec: SceneSpec, k: CameraIntrinsics, pose: PoseO2C | None = None
) -> OracleFrame:
    """Exact image, mask and camera-Z depth of the scene, occluder applied."""
    pose = pose or spec.pose
    if pose.t[2] <= 0:
        raise BehindCameraError("scene object is behind the camera")
    rows, cols = np.meshgrid(np.arange(k.height) + 0.5, np.arange(k.width) + 0.5, indexing="ij")
    d_cam = pixel_directions(k, cols.reshape(-1), rows.reshape(-1))
    c2o = o2c_to_c2o(pose)
    dirs = c2o.rot.apply(d_cam)
    hit, t = sphere_trace(spec, c2o.t, dirs)

    n = d_cam.shape[0]
    image = np.full((n, 3), BACKGROUND)
    depth = np.zeros(n)
    pts = c2o.t + t[hit, None] * dirs[hit]
    shade = _AMBIENT + (1.0 - _AMBIENT) * np.maximum(_normals(spec, pts) @ _LIGHT, 0.0)
    image[hit] = np.clip(_albedo(spec, pts) * shade[:, None], 0.0, 1.0)
    depth[hit] = t[hit] * d_cam[hit, 2]
    mask = np.where(hit, MASK_FOREGROUND, MASK_BACKGROUND)

    frame = OracleFrame(
        image.reshape(k.height, k.width, 3),
        mask.reshape(k.height, k.width),
        depth.reshape(k.height, k.width),
    )
    return apply_occluder(frame, spec.occluder) if spec.occluder else frame


def apply_occluder(frame: OracleFrame, occ: Occluder) -> OracleFrame:
    cols = np.flatnonzero(np.any(frame.mask == MASK_FOREGROUND, axis=0))
    if cols.size == 0 or occ.fraction <= 0:
        return frame
    lo, hi = int(cols[0]), int(cols[-1]) + 1
    width = int(math.ceil(occ.fraction * (hi - lo)))
    bar = slice(lo, lo + width) if occ.side == "left" else slice(hi - width, hi)
    image, mask, depth = frame.image.copy(), frame.mask.copy(), frame.depth.copy()
    image[:, bar] = occ.color
    mask[:, bar] = MASK_UNKNOWN
    depth[:, bar] = 0.0
    return OracleFrame(image, mask, depth)


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ObjectDraw:
    """Per-object parameters shared by every view."""

    family: ShapeFamily
    dims: BoxDimensions
    exponents: tuple[float, float]
    palette: np.ndarray
    stripe_freq: float
    stripe_phase: float
    z: float
    yaw0: float
    pitch: float
    roll: float
    offset: tuple[float, float]


def sample_object(rng: np.random.Generator, cfg: SynthConfig) -> ObjectDraw:
    family = cfg.families[int(rng.integers(len(cfg.families)))]
    dims = BoxDimensions(**{key: float(rng.uniform(*bounds)) for key, bounds in DIMS_RANGE.items()})
    return ObjectDraw(
        family=family,
        dims=dims,
        exponents=(float(rng.uniform(*EXPONENT_RANGE)), float(rng.uniform(*EXPONENT_RANGE))),
        palette=rng.uniform(0.1, 0.9, size=(3, 3)),
        stripe_freq=float(rng.integers(1, 4)),
        stripe_phase=float(rng.uniform(0.0, 3.0)),
        z=float(rng.uniform(*cfg.z_range)),
        yaw0=float(rng.uniform(0.0, 2.0 * math.pi)),
        pitch=float(rng.uniform(-cfg.tilt_max, cfg.tilt_max)),
        roll=float(rng.uniform(-cfg.tilt_max, cfg.tilt_max)),
        offset=(
            float(rng.uniform(-LATERAL_OFFSET, LATERAL_OFFSET)),
            float(rng.uniform(-LATERAL_OFFSET, LATERAL_OFFSET)),
        ),
    )


def view_pose(obj: ObjectDraw, view: int, views: int) -> PoseO2C:
    """Views are evenly spaced azimuths around the object."""
    yaw = obj.yaw0 + 2.0 * math.pi * view / views
    rot: RotationSO3 = rot_x(obj.pitch) @ rot_z(obj.roll) @ rot_y(yaw)
    return PoseO2C(rot, obj.z * np.array([obj.offset[0], obj.offset[1], 1.0]))


def frame_intrinsics(
    dims: BoxDimensions, pose: PoseO2C, fill: float, size: int = IMAGE_SIZE
) -> CameraIntrinsics:
    """Focal length that makes the projected box's larger side span `fill` of the frame."""
    x_c = transform_point(pose, dims.corners())
    if np.any(x_c[:, 2] <= 0):
        raise BehindCameraError("box corner behind the camera")
    normalized = x_c[:, :2] / x_c[:, 2:3]
    span = float(np.max(np.ptp(normalized, axis=0)))
    f = fill * size / span
    f = min(f, (size / 2.0 - 1.0) / float(np.max(np.abs(normalized))))
    return CameraIntrinsics(fx=f, fy=f, cx=size / 2.0, cy=size / 2.0, width=size, height=size)


def scene_for_view(
    obj: ObjectDraw, view: int, cfg: SynthConfig, rng: np.random.Generator
) -> tuple[SceneSpec, CameraIntrinsics]:
    pose = view_pose(obj, view, cfg.views)
    k = frame_intrinsics(obj.dims, pose, float(rng.uniform(*cfg.fill_range)))
    occluder = None
    if rng.uniform() < cfg.occlusion_prob:
        occluder = Occluder(
            fraction=float(rng.uniform(0.0, cfg.occlusion_max)),
            side="left" if rng.uniform() < 0.5 else "right",
            color=tuple(float(c) for c in rng.uniform(0.0, 1.0, size=3)),  # type: ignore[arg-type]
        )
    spec = SceneSpec(
        family=obj.family,
        dims=obj.dims,
        pose=pose,
        palette=obj.palette,
        stripe_freq=obj.stripe_freq,
        stripe_phase=obj.stripe_phase,
        exponents=obj.exponents,
        occluder=occluder,
    )
    return spec, k


# ---------------------------------------------------------------------------
# Records and manifest
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class FrameRecord:
    object_id: int
    view_id: int
    family: ShapeFamily
    image: np.ndarray
    mask: np.ndarray
    depth: np.ndarray
    intrinsics: CameraIntrinsics
    pose: PoseO2C
    dims: BoxDimensions

    def corners(self) -> BoxCorners2D:
        return project_box_corners(self.dims, self.pose, self.intrinsics)

    @property
    def roi(self) -> Roi:
        k = self.intrinsics
        return Roi.bounding(self.corners().pts).clipped(k.width, k.height)

    def with_pose(self, pose: PoseO2C) -> FrameRecord:
        return replace(self, pose=pose)


class IntrinsicsEntry(BaseModel):
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int


class DimsEntry(BaseModel):
    h: float
    w: float
    l: float  # noqa: E741


class FrameEntry(BaseModel):
    object_id: int
    view_id: int
    family: ShapeFamily
    image: str
    mask: str
    depth: str
    pose: list[list[float]]  # 3×4 [R | T], row-major
    intrinsics: IntrinsicsEntry
    dims: DimsEntry


class DatasetManifest(BaseModel):
    format_version: int = MANIFEST_VERSION
    tool: str = TOOL_NAME
    version: str = __version__
    echo: dict[str, Any] = {}
    frames: list[FrameEntry] = []

    def object_ids(self) -> list[int]:
        return sorted({f.object_id for f in self.frames})


def frame_stem(object_id: int, view_id: int) -> str:
    return f"frames/{object_id}_{view_id}"


def _entry_for(record: FrameRecord) -> FrameEntry:
    stem = frame_stem(record.object_id, record.view_id)
    k = record.intrinsics
    return FrameEntry(
        object_id=record.object_id,
        view_id=record.view_id,
        family=record.family,
        image=f"{stem}.img.supt",
        mask=f"{stem}.msk.supt",
        depth=f"{stem}.dep.supt",
        pose=record.pose.matrix().tolist(),
        intrinsics=IntrinsicsEntry(**k.to_dict()),
        dims=DimsEntry(h=record.dims.h, w=record.dims.w, l=record.dims.l),
    )


def _render_record(
    obj: ObjectDraw, object_id: int, view: int, cfg: SynthConfig, out_dir: Path
) -> FrameEntry:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, object_id, view]))
    spec, k = scene_for_view(obj, view, cfg, rng)
    frame = oracle_render(spec, k)
    record = FrameRecord(
        object_id=object_id,
        view_id=view,
        family=obj.family,
        image=frame.image,
        mask=frame.mask,
        depth=frame.depth,
        intrinsics=k,
        pose=spec.pose,
        dims=obj.dims,
    )
    entry = _entry_for(record)
    write_tensor(out_dir / entry.image, record.image)
    write_tensor(out_dir / entry.mask, record.mask)
    write_tensor(out_dir / entry.depth, record.depth)
    return entry


def generate_pack(
    cfg: SynthConfig, out_dir: Path, threads: int = 1, echo: dict[str, Any] | None = None
) -> DatasetManifest:
    """Render cfg.objects × cfg.views frames into `out_dir`; deterministic in cfg.seed."""
    (out_dir / "frames").mkdir(parents=True, exist_ok=True)
    objects = [
        sample_object(np.random.default_rng(np.random.SeedSequence([cfg.seed, oid])), cfg)
        for oid in range(cfg.objects)
    ]
    jobs = [(oid, view) for oid in range(cfg.objects) for view in range(cfg.views)]

    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_render_record, objects[o], o, v, cfg, out_dir) for o, v in jobs]
        done = track(
            futures, description="Rendering frames", console=stderr_console, transient=True
        )
        entries = [f.result() for f in done]

    manifest = DatasetManifest(echo=echo or {}, frames=entries)
    (out_dir / "manifest.json").write_text(manifest.model_dump_json(indent=2), encoding="utf-8")
    log.info("Wrote %d frames (%d objects) to %s", len(entries), cfg.objects, out_dir)
    return manifest


# ---------------------------------------------------------------------------
# Reading
# ---------------------------------------------------------------------------


def _validate(record: FrameRecord) -> None:
    h, w = record.intrinsics.height, record.intrinsics.width
    if record.image.shape != (h, w, 3):
        raise InvalidArgumentError(f"image shape {record.image.shape}, expected {(h, w, 3)}")
    if record.mask.shape != (h, w) or record.depth.shape != (h, w):
        raise InvalidArgumentError(f"mask/depth shapes {record.mask.shape}/{record.depth.shape}")
    if not np.all(np.isin(record.mask, (MASK_BACKGROUND, MASK_UNKNOWN, MASK_FOREGROUND))):
        raise InvalidArgumentError("mask holds values outside {0, 0.5, 1}")
    if np.any(record.depth[record.mask == MASK_FOREGROUND] <= 0):
        raise InvalidArgumentError("foreground pixel without valid depth")
    if not (np.all(np.isfinite(record.image)) and np.all(np.isfinite(record.depth))):
        raise InvalidArgumentError("non-finite image or depth values")


class PackReader:
    """Lazy, validating reader over a dataset pack."""

    def __init__(self, root: Path):
        self.root = root
        self.errors: list[RecordError] = []
        path = root / "manifest.json"
        try:
            self.manifest = DatasetManifest.model_validate_json(path.read_text(encoding="utf-8"))
        except OSError as e:
            raise ManifestError(f"cannot read {path}: {e}") from e
        except ValidationError as e:
            raise ManifestError(f"invalid manifest {path}: {e}") from e
        if self.manifest.format_version != MANIFEST_VERSION:
            raise ManifestError(
                f"manifest version {self.manifest.format_version} not supported "
                f"(expected {MANIFEST_VERSION})"
            )
        seen: set[tuple[int, int]] = set()
        for entry in self.manifest.frames:
            key = (entry.object_id, entry.view_id)
            if key in seen:
                raise ManifestError(f"duplicate frame object {key[0]} view {key[1]} in {path}")
            seen.add(key)

    def __len__(self) -> int:
        return len(self.manifest.frames)

    def load(self, entry: FrameEntry) -> FrameRecord:
        try:
            pose = np.asarray(entry.pose, dtype=np.float64)
            record = FrameRecord(
                object_id=entry.object_id,
                view_id=entry.view_id,
                family=entry.family,
                image=read_tensor(self.root / entry.image),
                mask=read_tensor(self.root / entry.mask),
                depth=read_tensor(self.root / entry.depth),
                intrinsics=CameraIntrinsics(**entry.intrinsics.model_dump()),
                pose=PoseO2C(RotationSO3(pose[:, :3]), pose[:, 3]),
                dims=BoxDimensions(**entry.dims.model_dump()),
            )
            _validate(record)
        except (TensorFileError, InvalidArgumentError, IndexError) as e:
            raise RecordError(entry.object_id, entry.view_id, str(e)) from e
        return record

    def records(self) -> Iterator[FrameRecord]:
        """Records in manifest order; failures are logged, collected in `errors` and skipped."""
        for entry in self.manifest.frames:
            try:
                yield self.load(entry)
            except RecordError as e:
                log.warning("Skipping %s", e)
                self.errors.append(e)

    def group_by_object(self) -> dict[int, list[FrameRecord]]:
        groups: dict[int, list[FrameRecord]] = {}
        for record in self.records():
            groups.setdefault(record.object_id, []).append(record)
        return groups


def read_pack(root: Path) -> Iterator[FrameRecord]:
    return PackReader(root).records()
