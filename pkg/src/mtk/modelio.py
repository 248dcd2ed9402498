"""Model files: config text plus a table of little-endian float32 tensors.

Layout::

    b"MTK1" | u32 version | u32 n | n bytes of UTF-8 "key: value" config
    repeated: u32 name_len | name | u32 rank | u32 dims... | f32 data
    u32 0   (end marker)
"""
from __future__ import annotations

import os
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import ContractError, DataError
from .framework import Model
from .models import ModelConfig, build_model, parse_key_values

MAGIC = b"MTK1"
VERSION = 1
_U32 = struct.Struct("<I")
_F32 = np.dtype("<f4")


def write_tensors(path, config_text: str, tensors: Mapping[str, np.ndarray]) -> None:
    """Write atomically (temp file + rename) so a crash never leaves half a file."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        cfg = config_text.encode("utf-8")
        f.write(MAGIC + _U32.pack(VERSION) + _U32.pack(len(cfg)) + cfg)
        for name, value in tensors.items():
            value = np.asarray(value)
            if value.dtype != np.float32:
                raise ContractError(f"tensor {name!r} is {value.dtype}; model files hold float32")
            raw = name.encode("utf-8")
            if not raw:
                raise ContractError("empty tensor name")
            f.write(_U32.pack(len(raw)) + raw + _U32.pack(value.ndim))
            f.write(struct.pack(f"<{value.ndim}I", *value.shape))
            f.write(np.ascontiguousarray(value, dtype=_F32).tobytes())
        f.write(_U32.pack(0))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated model file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def read_tensors(path) -> tuple[str, dict[str, np.ndarray]]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"model file not found: {path}")
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise DataError(f"{path}: not a model file (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise DataError(f"{path}: unsupported format version {version} (expected {VERSION})")
    config_text = r.take(r.u32()).decode("utf-8")
    tensors: dict[str, np.ndarray] = {}
    while True:
        n = r.u32()
        if n == 0:
            break
        name = r.take(n).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        tensors[name] = np.frombuffer(r.take(4 * count), dtype=_F32).reshape(shape).astype(np.float32)
    if r.pos != len(r.data):
        raise DataError(f"{path}: trailing bytes after end marker")
    return config_text, tensors


def save_model(model: Model, path, extra_config: Mapping[str, str] | None = None,
               extra_tensors: Mapping[str, np.ndarray] | None = None) -> None:
    text = model.config.to_text()
    for k, v in (extra_config or {}).items():
        text += f"{k}: {v}\n"
    tensors = dict(model.params)
    for k, v in (extra_tensors or {}).items():
        if k in tensors:
            raise ContractError(f"extra tensor {k!r} collides with a parameter")
        tensors[k] = v
    write_tensors(path, text, tensors)


def load_model(path) -> tuple[Model, dict[str, str], dict[str, np.ndarray]]:
    """Rebuild the model from its stored config and overwrite its parameters.

    Returns the model, config keys that are not model fields, and tensors
    that are not parameters (optimizer state, averages).
    """
    text, tensors = read_tensors(path)
    items = parse_key_values(text)
    known = {f.replace("_", "-") for f in ModelConfig.__dataclass_fields__}
    config = ModelConfig.from_mapping({k: v for k, v in items.items() if k in known})
    if config.dtype != "float32":
        raise DataError(f"{path}: model files hold float32 parameters, config says {config.dtype}")
    model = build_model(config)
    for name, value in model.params.items():
        if name not in tensors:
            raise DataError(f"{path}: missing parameter {name!r}")
        stored = tensors.pop(name)
        if stored.shape != value.shape:
            raise DataError(f"{path}: parameter {name!r} has shape {stored.shape}, "
                            f"config implies {value.shape}")
        value[...] = stored
    extra = {k: v for k, v in items.items() if k not in known}
    return model, extra, tensors
