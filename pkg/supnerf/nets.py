"""Networks: image encoder with cross-task shortcut, conditional NeRF decoder,
pose-refiner MLPs and the direct-regression pose head.

All modules are built from gradengine primitives and hold named Parameters.
Inputs are channel-first internally; the encoder accepts H×W×C arrays.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Iterator
from dataclasses import dataclass

import numpy as np
from numpy.typing import ArrayLike

from supnerf import gradengine as ge
from supnerf.constants import IMAGE_SIZE
from supnerf.errors import InvalidArgumentError, ShapeError
from supnerf.geometry import BoxDimensions
from supnerf.gradengine import Parameter, Tensor
from supnerf.settings import NetConfig, RefinerConfig

Field = Callable[[Tensor], tuple[Tensor, Tensor]]

_ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": ge.relu,
    "sigmoid": ge.sigmoid,
    "softplus": ge.softplus,
    "tanh": ge.tanh,
    "none": lambda x: x,
}

# Typical car-like box (h, w, l); the dims head starts out predicting it.
_DIMS_PRIOR = np.array([1.7, 1.85, 4.25])
_DIMS_FLOOR = 1e-3


def _inverse_softplus(y: np.ndarray) -> np.ndarray:
    return np.log(np.expm1(y))


# ---------------------------------------------------------------------------
# Module plumbing
# ---------------------------------------------------------------------------


class Module:
    """Container that discovers Parameters and sub-Modules by attribute order."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            path = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(f"{path}.")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        for name, p in self.named_parameters():
            p.name = name

    def freeze(self) -> None:
        """Stop recording gradients for every weight; inputs can still require them."""
        for p in self.parameters():
            p.requires_grad = False


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / n_in), size=(n_in, n_out)))
        self.bias = Parameter(np.zeros(n_out))

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class Conv2d(Module):
    def __init__(
        self, c_in: int, c_out: int, rng: np.random.Generator, k: int = 3, stride: int = 2
    ):
        fan_in = c_in * k * k
        self.weight = Parameter(rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(c_out, c_in, k, k)))
        self.bias = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2

    def __call__(self, x: Tensor) -> Tensor:
        return ge.conv2d(x, self.weight, self.bias, self.stride, self.padding)


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input first), one activation per layer, and an output transform."""

    widths: tuple[int, ...]
    activations: tuple[str, ...]
    output: str = "none"

    def __post_init__(self) -> None:
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise InvalidArgumentError(f"MLP widths must be positive, got {self.widths}")
        if len(self.activations) != len(self.widths) - 1:
            raise InvalidArgumentError("MLP needs one activation per layer")
        unknown = [a for a in (*self.activations, self.output) if a not in _ACTIVATIONS]
        if unknown:
            raise InvalidArgumentError(f"unknown activations: {unknown}")

    @classmethod
    def hidden(cls, widths: tuple[int, ...], output: str = "none") -> MlpSpec:
        """relu on every hidden layer, linear last layer."""
        acts = ("relu",) * (len(widths) - 2) + ("none",)
        return cls(widths, acts, output)


class Mlp(Module):
    def __init__(self, spec: MlpSpec, rng: np.random.Generator):
        self.spec = spec
        self.layers = [
            Linear(n_in, n_out, rng)
            for n_in, n_out in zip(spec.widths[:-1], spec.widths[1:], strict=True)
        ]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.spec.widths[0]:
            raise ShapeError(f"MLP expects input width {self.spec.widths[0]}, got {x.shape}")
        for layer, act in zip(self.layers, self.spec.activations, strict=True):
            x = _ACTIVATIONS[act](layer(x))
        return _ACTIVATIONS[self.spec.output](x)


def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Parameter-free per-channel normalization over the spatial axes of (C, H, W)."""
    mu = x.mean(axis=(1, 2), keepdims=True)
    var = ge.square_difference(x, mu).mean(axis=(1, 2), keepdims=True)
    return (x - mu) / ge.sqrt(var + eps)


class ConvBlock(Module):
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        self.conv = Conv2d(c_in, c_out, rng)

    def __call__(self, x: Tensor) -> Tensor:
        return ge.relu(instance_norm(self.conv(x)))


# ---------------------------------------------------------------------------
# Encoder
# ---------------------------------------------------------------------------


@dataclass
class EncoderFeatures:
    """Block-4 activations around the shortcut subtraction."""

    pose: Tensor
    shape_texture: Tensor
    subtracted: Tensor


@dataclass
class EncoderOutput:
    pose_code: Tensor
    shape_code: Tensor
    texture_code: Tensor
    dims_raw: Tensor  # (3,) as (h, w, l), strictly positive
    corners_direct: Tensor  # (8, 2) in normalized patch coordinates
    features: EncoderFeatures | None = None

    def dims(self) -> BoxDimensions:
        h, w, l = (float(v) for v in self.dims_raw.data)  # noqa: E741
        return BoxDimensions(h=h, w=w, l=l)


class ImageEncoder(Module):
    """Five stride-2 conv blocks: 1-3 shared, 4-5 split into pose and shape/texture."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        w1, w2, w3, w4, w5 = cfg.encoder_widths
        self.shortcut = cfg.shortcut
        self.shared = [ConvBlock(4, w1, rng), ConvBlock(w1, w2, rng), ConvBlock(w2, w3, rng)]
        self.pose_block4 = ConvBlock(w3, w4, rng)
        self.st_block4 = ConvBlock(w3, w4, rng)
        self.pose_block5 = ConvBlock(w4, w5, rng)
        self.st_block5 = ConvBlock(w4, w5, rng)
        self.pose_head = Linear(w5, cfg.latent, rng)
        self.corner_head = Linear(cfg.latent, 16, rng)
        self.shape_head = Linear(w5, cfg.latent, rng)
        self.texture_head = Linear(w5, cfg.latent, rng)
        self.dims_head = Linear(2 * cfg.latent, 3, rng)
        self.dims_head.weight.data *= 0.01
        self.dims_head.bias.data = _inverse_softplus(_DIMS_PRIOR)

    def __call__(
        self, image: ArrayLike, mask: ArrayLike, return_features: bool = False
    ) -> EncoderOutput:
        img = np.asarray(image, dtype=np.float64)
        msk = np.asarray(mask, dtype=np.float64)
        if msk.ndim == 2:
            msk = msk[:, :, None]
        if img.shape != (IMAGE_SIZE, IMAGE_SIZE, 3) or msk.shape != (IMAGE_SIZE, IMAGE_SIZE, 1):
            raise ShapeError(
                f"encoder expects {IMAGE_SIZE}x{IMAGE_SIZE} image and mask, "
                f"got {img.shape} and {msk.shape}"
            )
        x = Tensor(np.concatenate([img, msk], axis=2).transpose(2, 0, 1))

        for block in self.shared:
            x = block(x)
        pose4 = self.pose_block4(x)
        st4 = self.st_block4(x)
        st4_sub = st4 - pose4 if self.shortcut else st4

        pose_feat = self.pose_block5(pose4).mean(axis=(1, 2))
        st_feat = self.st_block5(st4_sub).mean(axis=(1, 2))

        pose_code = self.pose_head(pose_feat)
        shape_code = self.shape_head(st_feat)
        texture_code = self.texture_head(st_feat)
        dims = ge.softplus(self.dims_head(ge.concat([shape_code, texture_code]))) + _DIMS_FLOOR
        corners = ge.sigmoid(self.corner_head(pose_code)).reshape(8, 2)

        features = EncoderFeatures(pose4, st4, st4_sub) if return_features else None
        return EncoderOutput(pose_code, shape_code, texture_code, dims, corners, features)


# ---------------------------------------------------------------------------
# NeRF decoder
# ---------------------------------------------------------------------------


def positional_encoding(x: Tensor, n_freqs: int) -> Tensor:
    """[x, sin(2^k π x), cos(2^k π x)] for k < n_freqs, shape (N, 3 + 6·n_freqs)."""
    if n_freqs == 0:
        return x
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    n = x.shape[0]
    scaled = (x.reshape(n, 3, 1) * freqs).reshape(n, 3 * n_freqs)
    return ge.concat([x, ge.sin(scaled), ge.cos(scaled)], axis=1)


class NerfDecoder(Module):
    """Density trunk conditioned on the shape code; color head adds the texture code.

    σ never sees the texture code.
    """

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.n_freqs = cfg.pe_frequencies
        self.latent = cfg.latent
        pe_dim = 3 + 6 * cfg.pe_frequencies
        trunk = (pe_dim + cfg.latent,) + (cfg.hidden,) * cfg.density_layers
        self.trunk = Mlp(MlpSpec(trunk, ("relu",) * cfg.density_layers), rng)
        self.sigma_head = Linear(cfg.hidden, 1, rng)
        color = (cfg.hidden + cfg.latent,) + (cfg.hidden,) * cfg.color_layers + (3,)
        self.color = Mlp(MlpSpec.hidden(color, output="sigmoid"), rng)

    def __call__(
        self, x: Tensor, shape_code: Tensor, texture_code: Tensor
    ) -> tuple[Tensor, Tensor]:
        n = x.shape[0]
        shape_rows = ge.broadcast_to(shape_code.reshape(1, self.latent), (n, self.latent))
        h = self.trunk(ge.concat([positional_encoding(x, self.n_freqs), shape_rows], axis=1))
        sigma = ge.softplus(self.sigma_head(h)).reshape(n)
        texture_rows = ge.broadcast_to(texture_code.reshape(1, self.latent), (n, self.latent))
        rgb = self.color(ge.concat([h, texture_rows], axis=1))
        return sigma, rgb

    def field(self, shape_code: Tensor, texture_code: Tensor) -> Field:
        """Bind codes, giving a points -> (σ, rgb) function for the renderer."""
        return lambda x: self(x, shape_code, texture_code)


# ---------------------------------------------------------------------------
# Pose heads
# ---------------------------------------------------------------------------


@dataclass
class RawPoseUpdate:
    dq: Tensor  # (3,) radians
    shift: Tensor  # (2,) pixels
    log_rho: Tensor  # (1,)


class PoseRefinerNet(Module):
    """Box encoder (16→H→H) and update trunk (pose ⊕ box → H → H) with three heads."""

    def __init__(self, cfg: NetConfig, rcfg: RefinerConfig, rng: np.random.Generator):
        self.rot_step_max = rcfg.rot_step_max
        self.shift_max = rcfg.shift_max_px
        self.log_rho_max = rcfg.log_rho_max
        self.box_encoder = Mlp(
            MlpSpec((16, cfg.box_hidden, cfg.box_hidden), ("relu", "relu")), rng
        )
        self.trunk = Mlp(
            MlpSpec(
                (cfg.latent + cfg.box_hidden, cfg.refiner_hidden, cfg.refiner_hidden),
                ("relu", "relu"),
            ),
            rng,
        )
        self.rot_head = Linear(cfg.refiner_hidden, 3, rng)
        self.shift_head = Linear(cfg.refiner_hidden, 2, rng)
        self.depth_head = Linear(cfg.refiner_hidden, 1, rng)
        for head in (self.rot_head, self.shift_head, self.depth_head):
            head.weight.data *= 0.1

    def encode_box(self, corners_normalized: ArrayLike) -> Tensor:
        flat = np.asarray(corners_normalized, dtype=np.float64).reshape(16)
        return self.box_encoder(Tensor(flat))

    def __call__(self, pose_code: Tensor, corners_normalized: ArrayLike) -> RawPoseUpdate:
        h = self.trunk(ge.concat([pose_code, self.encode_box(corners_normalized)]))
        dq = self.rot_step_max * ge.tanh(self.rot_head(h))
        shift = self.shift_max * ge.tanh(self.shift_head(h))
        log_rho = ge.clip(self.depth_head(h), lo=-self.log_rho_max, hi=self.log_rho_max)
        return RawPoseUpdate(dq, shift, log_rho)


class DirectPoseHead(Module):
    """One-shot (q, u, v, log Z) regression from the pose code."""

    def __init__(self, cfg: NetConfig, rng: np.random.Generator):
        self.mlp = Mlp(MlpSpec.hidden((cfg.latent, cfg.direct_hidden, 6)), rng)

    def __call__(self, pose_code: Tensor) -> Tensor:
        return self.mlp(pose_code)


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------


class SupNerfModel(Module):
    def __init__(self, cfg: NetConfig, rcfg: RefinerConfig):
        rng = np.random.default_rng(cfg.seed)
        self.encoder = ImageEncoder(cfg, rng)
        self.decoder = NerfDecoder(cfg, rng)
        self.refiner = PoseRefinerNet(cfg, rcfg, rng)
        self.direct_head = DirectPoseHead(cfg, rng)
        self.assign_names()
