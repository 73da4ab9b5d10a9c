"""Versioned binary container for named tensors plus the model config.

Layout (all integers little-endian uint32):

    magic "CAPSTXT1"
    config_len, config JSON (UTF-8)
    per tensor, sorted by name:
        name_len, name (UTF-8), rank, dims..., raw float32 data (LE)

Tensors are stored as float32, so a round trip is bit-exact for models
trained in the default precision.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"CAPSTXT1"
_U32 = struct.Struct("<I")


def save_checkpoint(path, tensors: dict[str, np.ndarray], config: dict) -> None:
    blob = bytearray()
    blob += MAGIC
    config_bytes = json.dumps(config, sort_keys=True).encode("utf-8")
    blob += _U32.pack(len(config_bytes))
    blob += config_bytes
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype=np.float32)
        name_bytes = name.encode("utf-8")
        blob += _U32.pack(len(name_bytes))
        blob += name_bytes
        blob += _U32.pack(arr.ndim)
        for dim in arr.shape:
            blob += _U32.pack(dim)
        blob += arr.tobytes(order="C")
    Path(path).write_bytes(bytes(blob))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise FormatError(
            f"{path}: not a supported checkpoint (magic {raw[:8]!r}, expected {MAGIC!r})"
        )
    offset = len(MAGIC)

    def read_u32() -> int:
        nonlocal offset
        if offset + 4 > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        (value,) = _U32.unpack_from(raw, offset)
        offset += 4
        return value

    def read_bytes(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        out = raw[offset : offset + count]
        offset += count
        return out

    config = json.loads(read_bytes(read_u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    while offset < len(raw):
        name = read_bytes(read_u32()).decode("utf-8")
        rank = read_u32()
        shape = tuple(read_u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(read_bytes(4 * count), dtype="<f4")
        tensors[name] = data.reshape(shape).copy()
    return tensors, config


def save_model(path, model) -> None:
    """Persist a trained model: every named tensor plus its config."""
    config = {
        "model": model.cfg.to_dict(),
        "vocab_size": model.vocab_size,
        "max_len": model.max_len,
    }
    save_checkpoint(path, model.named_tensors(), config)


def load_model(path):
    """Rebuild a model from a checkpoint written by ``save_model``."""
    from .config import ModelConfig
    from .model import CapsTextModel

    tensors, config = load_checkpoint(path)
    for key in ("model", "vocab_size", "max_len"):
        if key not in config:
            raise FormatError(f"{path}: checkpoint config is missing {key!r}")
    cfg = ModelConfig.from_dict(config["model"])
    model = CapsTextModel(cfg, vocab_size=int(config["vocab_size"]),
                          max_len=int(config["max_len"]))
    model.load_tensors(tensors)
    return model
