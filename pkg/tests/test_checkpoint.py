from __future__ import annotations

import numpy as np
import pytest

from supnerf.checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from supnerf.errors import (
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
    MissingTensorError,
    ShapeError,
)
from supnerf.nets import Linear, Module, SupNerfModel
from supnerf.settings import RefinerConfig, RunConfig


class TwoLayer(Module):
    def __init__(self, n_hidden: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.first = Linear(3, n_hidden, rng)
        self.second = Linear(n_hidden, 1, rng)
        self.assign_names()


def snapshot(model: Module) -> dict[str, np.ndarray]:
    return {name: p.data.copy() for name, p in model.named_parameters()}


def test_round_trip_is_bit_identical(tmp_path, tiny_net):
    cfg = RunConfig(net=tiny_net)
    src = SupNerfModel(tiny_net, RefinerConfig())
    path = tmp_path / "model.supn"
    save_checkpoint(path, src, cfg.echo())

    dst = SupNerfModel(tiny_net.model_copy(update={"seed": 99}), RefinerConfig())
    data = load_checkpoint(path, dst, tiny_net)
    assert data.echo["tool"] == "supnerf"
    for name, value in snapshot(src).items():
        np.testing.assert_array_equal(dict(dst.named_parameters())[name].data, value)


def test_truncated_file_leaves_model_untouched(tmp_path):
    path = tmp_path / "model.supn"
    save_checkpoint(path, TwoLayer(4, seed=1), {})
    path.write_bytes(path.read_bytes()[:-5])

    model = TwoLayer(4, seed=2)
    before = snapshot(model)
    with pytest.raises(CorruptCheckpointError):
        load_checkpoint(path, model)
    for name, p in model.named_parameters():
        np.testing.assert_array_equal(p.data, before[name])


def test_bad_magic(tmp_path):
    path = tmp_path / "model.supn"
    path.write_bytes(b"NOPE" + bytes(12))
    with pytest.raises(CorruptCheckpointError):
        read_checkpoint(path)


def test_unsupported_version(tmp_path):
    path = tmp_path / "model.supn"
    save_checkpoint(path, TwoLayer(4), {})
    raw = bytearray(path.read_bytes())
    raw[4:8] = (99).to_bytes(4, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError):
        read_checkpoint(path)


def test_shape_mismatch_names_tensor(tmp_path):
    path = tmp_path / "model.supn"
    save_checkpoint(path, TwoLayer(4), {})
    with pytest.raises(ShapeError, match="first.weight"):
        load_checkpoint(path, TwoLayer(5))


def test_missing_tensor(tmp_path):
    class OneLayer(Module):
        def __init__(self) -> None:
            self.first = Linear(3, 4, np.random.default_rng(0))
            self.assign_names()

    path = tmp_path / "model.supn"
    save_checkpoint(path, OneLayer(), {})
    with pytest.raises(MissingTensorError):
        load_checkpoint(path, TwoLayer(4))


def test_net_config_mismatch(tmp_path, tiny_net):
    path = tmp_path / "model.supn"
    save_checkpoint(path, SupNerfModel(tiny_net, RefinerConfig()), RunConfig(net=tiny_net).echo())
    other = tiny_net.model_copy(update={"shortcut": False})
    with pytest.raises(ConfigMismatchError, match="net.shortcut"):
        load_checkpoint(path, SupNerfModel(other, RefinerConfig()), other)


def test_refiner_bounds_mismatch(tmp_path, tiny_net):
    saved = RefinerConfig(rot_step_max=0.1)
    path = tmp_path / "model.supn"
    echo = RunConfig(net=tiny_net, refiner=saved).echo()
    save_checkpoint(path, SupNerfModel(tiny_net, saved), echo)

    other = RefinerConfig(rot_step_max=0.3)
    with pytest.raises(ConfigMismatchError, match="refiner.rot_step_max"):
        load_checkpoint(path, SupNerfModel(tiny_net, other), tiny_net, other)


def test_refiner_settings_outside_the_bounds_are_ignored(tmp_path, tiny_net):
    saved = RefinerConfig(iterations=3, init_depth=20.0)
    path = tmp_path / "model.supn"
    echo = RunConfig(net=tiny_net, refiner=saved).echo()
    save_checkpoint(path, SupNerfModel(tiny_net, saved), echo)

    other = RefinerConfig(iterations=5, init_depth=15.0)
    load_checkpoint(path, SupNerfModel(tiny_net, other), tiny_net, other)
