"""Training and inference losses, and evaluation metrics.

Masks use three classes: 0 background, ½ unknown (occluded), 1 foreground.
Unknown pixels never contribute to a loss or a metric.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
from numpy.typing import ArrayLike, NDArray

from supnerf import gradengine as ge
from supnerf.constants import (
    BCE_EPS,
    MASK_FOREGROUND,
    MASK_UNKNOWN,
    PSNR_CAP,
    PSNR_MSE_FLOOR,
)
from supnerf.errors import ShapeError
from supnerf.geometry import BoxCorners2D, BoxDimensions, CameraIntrinsics, PoseO2C
from supnerf.gradengine import Tensor
from supnerf.nets import Field
from supnerf.renderer import RenderOutput, render_pose
from supnerf.settings import LossWeights, RenderConfig

log = logging.getLogger(__name__)

Stage = Literal["init", "ff", "nerf"]


# ---------------------------------------------------------------------------
# Targets at render resolution
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PatchTargets:
    """Image, mask and depth reduced to the rendered patch resolution."""

    image: NDArray[np.float64]  # (P, P, 3)
    mask: NDArray[np.float64]  # (P, P)
    depth: NDArray[np.float64]  # (P, P), 0 = invalid


def downsample_targets(
    image: ArrayLike, mask: ArrayLike, depth: ArrayLike, stride: int
) -> PatchTargets:
    """Block-reduce full-resolution targets by `stride`.

    Image is the block mean. A block with any unknown pixel is unknown, else
    foreground when at least half its pixels are. Depth is the block mean when
    every pixel in the block is valid.
    """
    img = np.asarray(image, dtype=np.float64)
    msk = np.asarray(mask, dtype=np.float64)
    dep = np.asarray(depth, dtype=np.float64)
    h, w = msk.shape
    if h % stride or w % stride:
        raise ShapeError(f"stride {stride} does not divide target size {msk.shape}")
    p, q = h // stride, w // stride

    def blocks(a: np.ndarray) -> np.ndarray:
        return a.reshape(p, stride, q, stride, *a.shape[2:]).swapaxes(1, 2).reshape(
            p, q, stride * stride, *a.shape[2:]
        )

    img_b, msk_b, dep_b = blocks(img), blocks(msk), blocks(dep)
    any_unknown = np.any(msk_b == MASK_UNKNOWN, axis=2)
    fg_frac = np.mean(msk_b == MASK_FOREGROUND, axis=2)
    out_mask = np.where(any_unknown, MASK_UNKNOWN, np.where(fg_frac >= 0.5, 1.0, 0.0))
    all_valid = np.all(dep_b > 0, axis=2)
    out_depth = np.where(all_valid, dep_b.mean(axis=2), 0.0)
    return PatchTargets(img_b.mean(axis=2), out_mask, out_depth)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


@dataclass
class MaskedLoss:
    value: Tensor
    empty: bool = False  # no pixel qualified; value is 0


def _zero_loss() -> MaskedLoss:
    return MaskedLoss(Tensor(0.0), empty=True)


def loss_rgb(render: RenderOutput, image: ArrayLike, mask: ArrayLike) -> MaskedLoss:
    """Mean squared color error over foreground pixels and channels."""
    fg = np.nonzero(np.asarray(mask) == MASK_FOREGROUND)
    if fg[0].size == 0:
        log.debug("loss_rgb: no foreground pixels")
        return _zero_loss()
    target = np.asarray(image, dtype=np.float64)[fg]
    return MaskedLoss(ge.square_difference(render.rgb[fg], target).mean())


def loss_occ(render: RenderOutput, mask: ArrayLike) -> MaskedLoss:
    """Mean binary cross-entropy of occupancy against the mask over known pixels."""
    m = np.asarray(mask)
    known = np.nonzero(m != MASK_UNKNOWN)
    if known[0].size == 0:
        log.debug("loss_occ: every pixel is unknown")
        return _zero_loss()
    target = (m[known] == MASK_FOREGROUND).astype(np.float64)
    occ = ge.clip(render.occupancy[known], lo=BCE_EPS, hi=1.0 - BCE_EPS)
    bce = -(target * ge.log(occ) + (1.0 - target) * ge.log(1.0 - occ))
    return MaskedLoss(bce.mean())


def _corner_array(c: BoxCorners2D | Tensor | ArrayLike) -> Tensor:
    if isinstance(c, BoxCorners2D):
        return Tensor(c.pts)
    return ge.lift(c) if isinstance(c, Tensor) else Tensor(np.asarray(c, dtype=np.float64))


def loss_pose_corners(
    pred: BoxCorners2D | Tensor | ArrayLike, gt: BoxCorners2D | Tensor | ArrayLike
) -> Tensor:
    """(1/8) Σ ‖pred_i - gt_i‖ over matched corners, in pixels."""
    p, g = _corner_array(pred), _corner_array(gt)
    if p.shape != (8, 2) or g.shape != (8, 2):
        raise ShapeError(f"corner sets must be (8, 2), got {p.shape} and {g.shape}")
    return ge.sqrt(ge.square_difference(p, g).sum(axis=1)).mean()


def loss_dims(pred: Tensor, gt: BoxDimensions) -> Tensor:
    """Mean squared log-ratio of predicted to true (h, w, l)."""
    return ge.square(ge.log(pred) - np.log(gt.as_array())).mean()


@dataclass
class TrainLoss:
    total: Tensor
    components: dict[str, float] = field(default_factory=lambda: {})
    empty_rgb: bool = False


def total_train_loss(
    l_rgb: MaskedLoss,
    l_occ: MaskedLoss,
    pose_terms: Sequence[Tensor],
    weights: LossWeights,
    l_direct: Tensor | None = None,
    l_dims: Tensor | None = None,
) -> TrainLoss:
    """L_rgb + w_occ L_occ + w_pose (L_direct + Σ_t L_t) + w_dims L_dims."""
    pose_sum: Tensor = Tensor(0.0)
    components = {"rgb": l_rgb.value.item(), "occ": l_occ.value.item()}
    if l_direct is not None:
        pose_sum = pose_sum + l_direct
        components["pose_direct"] = l_direct.item()
    for t, term in enumerate(pose_terms):
        pose_sum = pose_sum + term
        components[f"pose_iter{t + 1}"] = term.item()
    total = l_rgb.value + weights.w_occ * l_occ.value + weights.w_pose * pose_sum
    if l_dims is not None:
        total = total + weights.w_dims * l_dims
        components["dims"] = l_dims.item()
    return TrainLoss(total=total, components=components, empty_rgb=l_rgb.empty)


def recompute_total(components: dict[str, float], weights: LossWeights) -> float:
    """Weighted sum of logged components (matches total_train_loss)."""
    pose = sum(v for k, v in components.items() if k.startswith("pose_"))
    return (
        components["rgb"]
        + weights.w_occ * components["occ"]
        + weights.w_pose * pose
        + weights.w_dims * components.get("dims", 0.0)
    )


def total_infer_loss(render: RenderOutput, targets: PatchTargets, w_occ: float) -> Tensor:
    """L_rgb + w_occ L_occ with network weights frozen."""
    return (
        loss_rgb(render, targets.image, targets.mask).value
        + w_occ * loss_occ(render, targets.mask).value
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def psnr(a: ArrayLike, b: ArrayLike, mask: ArrayLike) -> float | None:
    """PSNR over foreground pixels, capped at 99 dB; None without foreground."""
    fg = np.asarray(mask) == MASK_FOREGROUND
    if not np.any(fg):
        return None
    diff = np.asarray(a, dtype=np.float64)[fg] - np.asarray(b, dtype=np.float64)[fg]
    mse = float(np.mean(diff * diff))
    if mse < PSNR_MSE_FLOOR:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def depth_error(
    rendered: ArrayLike, gt: ArrayLike, hit: ArrayLike
) -> float | None:
    """Mean |Δdepth| over pixels with valid ground truth and a rendered hit."""
    r = np.asarray(rendered, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    valid = (g > 0) & np.asarray(hit, dtype=bool)
    if not np.any(valid):
        return None
    return float(np.mean(np.abs(r[valid] - g[valid])))


@dataclass(frozen=True, eq=False)
class ViewTarget:
    """One view of an object at its ground-truth pose."""

    view_id: int
    pose: PoseO2C
    k: CameraIntrinsics
    targets: PatchTargets


@dataclass
class CrossViewScore:
    psnr_cross: float | None
    de_cross: float | None
    count: int


def _mean_defined(values: Sequence[float | None]) -> float | None:
    defined = [v for v in values if v is not None]
    return float(np.mean(defined)) if defined else None


def cross_view_eval(
    field: Field,
    dims: BoxDimensions,
    views: Sequence[ViewTarget],
    cfg: RenderConfig,
    optimizing_view: int | None = None,
) -> CrossViewScore:
    """Render codes fitted on one view at every other view's GT pose and score them.

    Views whose id equals `optimizing_view` are skipped. With no remaining view
    the result carries None markers and count 0.
    """
    scores: list[tuple[float | None, float | None]] = []
    for view in views:
        if view.view_id == optimizing_view:
            continue
        out = render_pose(view.pose, dims, view.k, field, cfg)
        t = view.targets
        scores.append((
            psnr(out.rgb.data, t.image, t.mask),
            depth_error(out.depth.data, t.depth, out.hit),
        ))
    if not scores:
        return CrossViewScore(None, None, 0)
    return CrossViewScore(
        psnr_cross=_mean_defined([s[0] for s in scores]),
        de_cross=_mean_defined([s[1] for s in scores]),
        count=len(scores),
    )
