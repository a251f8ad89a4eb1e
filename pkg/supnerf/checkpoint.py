"""Checkpoint persistence for model parameters.

Layout (little-endian):
    "SUPN" | u32 version | u32 n | n bytes UTF-8 JSON config echo | u32 count |
    count × (u32 name_len | name | u32 rank | rank × u64 extent | f64 payload)

Loading parses and validates the whole file before touching any parameter,
so a failed load never leaves a model half-updated.
"""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np

from supnerf.constants import CHECKPOINT_MAGIC, CHECKPOINT_VERSION
from supnerf.errors import (
    CheckpointVersionError,
    ConfigMismatchError,
    CorruptCheckpointError,
    MissingTensorError,
    ShapeError,
    UnknownTensorError,
)
from supnerf.nets import Module
from supnerf.settings import NetConfig, RefinerConfig, diff_sections

log = logging.getLogger(__name__)

# Refiner fields baked into the forward pass.
REFINER_BOUNDS = ("rot_step_max", "shift_max_px", "log_rho_max")

_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


@dataclass
class CheckpointData:
    version: int
    echo: dict[str, Any]
    tensors: dict[str, np.ndarray]

    def net_config(self) -> NetConfig:
        """Network section of the stored config echo."""
        try:
            return NetConfig(**self.echo["config"]["net"])
        except (KeyError, TypeError) as e:
            raise CorruptCheckpointError("config echo has no network section") from e


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(
                f"checkpoint truncated at byte {self.pos} (needed {n} more)"
            )
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]

    def u64(self) -> int:
        return _U64.unpack(self.take(8))[0]


def save_checkpoint(path: Path, model: Module, echo: dict[str, Any]) -> None:
    """Write every named parameter plus the config echo to `path`."""
    named = list(model.named_parameters())
    echo_bytes = json.dumps(echo, sort_keys=True).encode("utf-8")
    chunks = [
        CHECKPOINT_MAGIC,
        _U32.pack(CHECKPOINT_VERSION),
        _U32.pack(len(echo_bytes)),
        echo_bytes,
        _U32.pack(len(named)),
    ]
    for name, p in named:
        raw_name = name.encode("utf-8")
        chunks += [_U32.pack(len(raw_name)), raw_name, _U32.pack(p.data.ndim)]
        chunks += [_U64.pack(n) for n in p.data.shape]
        chunks.append(np.ascontiguousarray(p.data, dtype="<f8").tobytes())

    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)
    log.debug("Saved %d tensors to %s", len(named), path)


def read_checkpoint(path: Path) -> CheckpointData:
    """Parse a checkpoint file without applying it."""
    cur = _Cursor(path.read_bytes())
    if cur.take(4) != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"checkpoint version {version} not supported (expected {CHECKPOINT_VERSION})"
        )
    try:
        echo = json.loads(cur.take(cur.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptCheckpointError(f"config echo is not valid JSON: {e}") from e

    tensors: dict[str, np.ndarray] = {}
    for _ in range(cur.u32()):
        try:
            name = cur.take(cur.u32()).decode("utf-8")
        except UnicodeDecodeError as e:
            raise CorruptCheckpointError("tensor name is not UTF-8") from e
        shape = tuple(cur.u64() for _ in range(cur.u32()))
        count = int(np.prod(shape, dtype=np.int64))
        payload = cur.take(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    if cur.pos != len(cur.buf):
        raise CorruptCheckpointError(f"{len(cur.buf) - cur.pos} trailing bytes after last tensor")
    return CheckpointData(version=version, echo=echo, tensors=tensors)


def load_checkpoint(
    path: Path,
    model: Module,
    net: NetConfig | None = None,
    refiner: RefinerConfig | None = None,
) -> CheckpointData:
    """Restore `model` from `path`.

    When `net` is given, the stored network config must match it field by field
    (seed excepted). When `refiner` is given, so must the refiner's update bounds.
    """
    data = read_checkpoint(path)
    stored_cfg = data.echo.get("config", {})
    mismatched: list[str] = []
    if net is not None:
        stored = dict(stored_cfg.get("net", {}))
        stored.pop("seed", None)  # initialization only
        mismatched += diff_sections(net.model_dump(mode="json", exclude={"seed"}), stored, "net")
    if refiner is not None:
        stored = {k: v for k, v in stored_cfg.get("refiner", {}).items() if k in REFINER_BOUNDS}
        expected = refiner.model_dump(mode="json", include=set(REFINER_BOUNDS))
        mismatched += diff_sections(expected, stored, "refiner")
    if mismatched:
        raise ConfigMismatchError(mismatched)

    named = dict(model.named_parameters())
    missing = sorted(set(named) - set(data.tensors))
    if missing:
        raise MissingTensorError(f"checkpoint lacks tensors: {', '.join(missing)}")
    unknown = sorted(set(data.tensors) - set(named))
    if unknown:
        raise UnknownTensorError(f"checkpoint has unknown tensors: {', '.join(unknown)}")
    for name, p in named.items():
        if data.tensors[name].shape != p.shape:
            raise ShapeError(
                f"tensor '{name}' has shape {data.tensors[name].shape}, model expects {p.shape}"
            )

    for name, p in named.items():
        p.data = data.tensors[name].copy()
        p.zero_grad()
    log.info("Loaded %d tensors from %s", len(named), path)
    return data
