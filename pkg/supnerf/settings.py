"""Run configuration.

Every tunable lives in one of the section models below; RunConfig nests them
and adds the two environment knobs (SUPNERF_THREADS, SUPNERF_DEBUG). Config
files use flat keys that mirror the CLI flags, e.g.::

    {"epochs": 10, "lr": 1e-4, "nerf_iters": 50, "pose_frame": "c2o"}

Precedence is flags > config file > environment > defaults.
"""

from __future__ import annotations

import math
import os
from pathlib import Path
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from supnerf import __version__
from supnerf.constants import DEFAULT_INIT_DEPTH, DEFAULT_ROT_PERTURB, IMAGE_SIZE, TOOL_NAME
from supnerf.errors import ConfigError

PoseFrame = Literal["o2c", "c2o"]
PoseModule = Literal["refiner", "mlp_direct"]
CodeSource = Literal["encoder", "fitted"]
ShapeFamily = Literal["cuboid", "capped_cuboid", "superellipsoid"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class RenderConfig(_Section):
    samples_per_ray: int = Field(64, ge=2)
    patch: int = Field(32, ge=1)
    background: tuple[float, float, float] = (0.5, 0.5, 0.5)
    image_size: int = IMAGE_SIZE

    @model_validator(mode="after")
    def _patch_divides_image(self) -> RenderConfig:
        if self.image_size % self.patch != 0:
            raise ValueError(f"patch {self.patch} does not divide image size {self.image_size}")
        return self

    @property
    def stride(self) -> int:
        return self.image_size // self.patch


class NetConfig(_Section):
    latent: int = Field(256, ge=1)
    hidden: int = Field(256, ge=1)
    encoder_widths: tuple[int, int, int, int, int] = (16, 32, 64, 128, 256)
    pe_frequencies: int = Field(8, ge=0)
    density_layers: int = Field(4, ge=1)
    color_layers: int = Field(2, ge=1)
    box_hidden: int = Field(256, ge=1)
    refiner_hidden: int = Field(256, ge=1)
    direct_hidden: int = Field(256, ge=1)
    shortcut: bool = True
    seed: int = 0


class RefinerConfig(_Section):
    iterations: int = Field(3, ge=1)
    init_depth: float = Field(DEFAULT_INIT_DEPTH, gt=0)
    rot_perturb_max: float = Field(DEFAULT_ROT_PERTURB, ge=0)
    rot_step_max: float = Field(0.5, gt=0)
    shift_max_px: float = Field(32.0, gt=0)
    log_rho_max: float = Field(1.0, gt=0)


class LossWeights(_Section):
    w_occ: float = Field(0.1, ge=0)
    w_pose: float = Field(0.01, ge=0)
    w_dims: float = Field(1.0, ge=0)


class TrainConfig(_Section):
    epochs: int = Field(40, ge=1)
    lr: float = Field(1e-4, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(8, ge=1)
    refiner_iters: int = Field(3, ge=1)
    seed: int = 0
    pose_module: PoseModule = "refiner"
    roi_jitter_px: float = Field(0.0, ge=0)
    roi_scale_range: tuple[float, float] = (1.0, 1.0)
    weights: LossWeights = LossWeights()


class InferConfig(_Section):
    ff_iters: int = Field(3, ge=0)
    nerf_iters: int = Field(50, ge=0)
    code_step: float = Field(0.02, gt=0)
    pose_step: float = Field(0.01, gt=0)
    pose_frame: PoseFrame = "o2c"
    freeze_pose: bool = False
    freeze_dims: bool = True
    report_iters: tuple[int, ...] = (20, 50)
    seed: int = 0
    dump_renders: bool = False
    cross_view: bool = False


class AblationConfig(_Section):
    max_records: int = Field(200, ge=1)
    code_source: CodeSource = "encoder"
    fit_iters: int = Field(50, ge=0)
    frame_rot_error: float = Field(0.2, ge=0)
    depth_ratio: float = Field(1.3, gt=0)
    sweep_rot_deg: tuple[float, ...] = (0.0, 5.0, 11.5, 23.0, 45.0)
    sweep_depth_ratios: tuple[float, ...] = (1.0, 1.3)
    no_improve_factor: float = 0.9
    fail_bound_deg: float = 10.0
    drift_bound_deg: float = 3.0
    loss_match_rel: float = 0.2
    te_gap_rel: float = 0.5


class SynthConfig(_Section):
    objects: int = Field(10, ge=1)
    views: int = Field(1, ge=1)
    seed: int = 0
    z_range: tuple[float, float] = (5.0, 40.0)
    fill_range: tuple[float, float] = (0.6, 0.9)
    occlusion_prob: float = Field(0.5, ge=0, le=1)
    occlusion_max: float = Field(0.4, ge=0, le=1)
    tilt_max: float = math.radians(10.0)
    families: tuple[ShapeFamily, ...] = ("cuboid", "capped_cuboid", "superellipsoid")


class RunConfig(BaseSettings):
    """Merged view of every section, echoed into each artifact."""

    model_config = SettingsConfigDict(
        env_prefix="SUPNERF_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="forbid",
        frozen=True,
    )

    threads: int = Field(default_factory=lambda: os.cpu_count() or 1, ge=1)
    debug: bool = True
    render: RenderConfig = RenderConfig()
    net: NetConfig = NetConfig()
    refiner: RefinerConfig = RefinerConfig()
    train: TrainConfig = TrainConfig()
    infer: InferConfig = InferConfig()
    ablation: AblationConfig = AblationConfig()
    synth: SynthConfig = SynthConfig()

    def echo(self) -> dict[str, Any]:
        """Config plus tool identity, embedded in every artifact."""
        return {
            "tool": TOOL_NAME,
            "version": __version__,
            "config": self.model_dump(mode="json"),
        }


# ---------------------------------------------------------------------------
# Flat keys
# ---------------------------------------------------------------------------

_SECTIONS: dict[str, type[_Section]] = {
    "render": RenderConfig,
    "net": NetConfig,
    "refiner": RefinerConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "ablation": AblationConfig,
    "synth": SynthConfig,
}


def _build_flat_keys() -> dict[str, list[tuple[str, ...]]]:
    """Map each flat key to every nested path it sets.

    A name shared by several sections (e.g. `seed`) sets all of them.
    """
    keys: dict[str, list[tuple[str, ...]]] = {"threads": [("threads",)], "debug": [("debug",)]}
    for section, model in _SECTIONS.items():
        for name in model.model_fields:
            if name == "weights":
                for weight in LossWeights.model_fields:
                    keys.setdefault(weight, []).append((section, "weights", weight))
                continue
            keys.setdefault(name, []).append((section, name))
    return keys


FLAT_KEYS = _build_flat_keys()


def _nest(flat: dict[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    unknown = sorted(key for key in flat if key not in FLAT_KEYS)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, value in flat.items():
        for path in FLAT_KEYS[key]:
            node = nested
            for part in path[:-1]:
                node = node.setdefault(part, {})
            node[path[-1]] = value
    return nested


def read_config_file(path: Path) -> dict[str, Any]:
    """Read a flat-key config file (JSON, or YAML since JSON is a subset)."""
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except (OSError, yaml.YAMLError) as e:
        raise ConfigError(f"cannot read config file {path}: {e}") from e
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError(f"config file {path} must hold a mapping of flat keys")
    return {str(k): v for k, v in raw.items()}


def load_run_config(
    path: Path | None = None,
    overrides: dict[str, Any] | None = None,
) -> RunConfig:
    """Merge flags > config file > environment > defaults into a RunConfig.

    Overrides whose value is None are treated as "flag not given".
    """
    flat = read_config_file(path) if path is not None else {}
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    try:
        return RunConfig(**_nest(flat))
    except ValidationError as e:
        raise ConfigError(str(e)) from e


def diff_sections(expected: dict[str, Any], actual: dict[str, Any], prefix: str) -> list[str]:
    """List dotted field names whose values differ between two dumped sections."""
    fields = sorted(set(expected) | set(actual))
    return [f"{prefix}.{name}" for name in fields if expected.get(name) != actual.get(name)]
