"""Shared fixtures: tiny networks and a small synthetic pack."""

from __future__ import annotations

from pathlib import Path

import numpy as np
import pytest

from supnerf.gradengine import set_finite_checks
from supnerf.gradsuite import tiny_net_config
from supnerf.settings import (
    AblationConfig,
    InferConfig,
    NetConfig,
    RenderConfig,
    RunConfig,
    SynthConfig,
    TrainConfig,
)
from supnerf.synthdata import generate_pack

PACK_SYNTH = SynthConfig(objects=2, views=2, seed=7, families=("cuboid",), occlusion_prob=0.0)


@pytest.fixture(autouse=True)
def _finite_checks():
    set_finite_checks(True)
    yield
    set_finite_checks(True)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_net() -> NetConfig:
    return tiny_net_config()


@pytest.fixture
def tiny_render() -> RenderConfig:
    return RenderConfig(patch=8, samples_per_ray=8)


@pytest.fixture
def tiny_cfg(tiny_net: NetConfig, tiny_render: RenderConfig) -> RunConfig:
    return RunConfig(
        threads=1,
        net=tiny_net,
        render=tiny_render,
        train=TrainConfig(epochs=1, batch_size=2),
        infer=InferConfig(ff_iters=1, nerf_iters=2, report_iters=(1,)),
        ablation=AblationConfig(max_records=2, fit_iters=1),
        synth=PACK_SYNTH,
    )


@pytest.fixture
def pack_synth() -> SynthConfig:
    return PACK_SYNTH


@pytest.fixture(scope="session")
def pack_dir(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """2 cuboid objects × 2 views, no occluders."""
    out = tmp_path_factory.mktemp("pack")
    generate_pack(PACK_SYNTH, out, threads=2)
    return out
