"""Binary checkpoint format.

Layout (all integers uint32 little-endian)::

    b"CIFT0001"
    count
    count x { name_len, name (utf-8), rank, rank x extent, float64 LE payload }
    config_len, config (utf-8 JSON)
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Dict, Tuple

import numpy as np

from .autograd.tensor import Tensor
from .errors import DataError
from .model import ModelConfig, ModelParams, param_shapes

MAGIC = b"CIFT0001"
_U32 = struct.Struct("<I")


def save(path, arrays: Dict[str, np.ndarray], config: dict) -> None:
    chunks = [MAGIC, _U32.pack(len(arrays))]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f8")
        chunks += [_U32.pack(len(raw)), raw, _U32.pack(arr.ndim)]
        chunks += [_U32.pack(n) for n in arr.shape]
        chunks.append(np.ascontiguousarray(arr).tobytes())
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    chunks += [_U32.pack(len(blob)), blob]
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DataError(f"{self.path}: truncated checkpoint")
        out = self.data[self.pos: self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return _U32.unpack(self.take(4))[0]


def load(path) -> Tuple[Dict[str, np.ndarray], dict]:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from None
    r = _Reader(data, path)
    if r.take(len(MAGIC)) != MAGIC:
        raise DataError(f"{path}: not a checkpoint (bad magic)")
    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        shape = tuple(r.u32() for _ in range(r.u32()))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape).astype(np.float64)
    config = json.loads(r.take(r.u32()).decode("utf-8"))
    return arrays, config


def save_params(path, params: ModelParams, extra: dict = None) -> None:
    config = {"mode": params.mode, "model": params.config.to_dict()}
    if extra:
        config.update(extra)
    save(path, params.arrays(), config)


def load_params(path) -> ModelParams:
    arrays, config = load(path)
    if "mode" not in config or "model" not in config:
        raise DataError(f"{path}: checkpoint config lacks mode/model")
    cfg = ModelConfig.from_dict(config["model"])
    mode = config["mode"]
    expected = {name: shape for name, shape, _ in param_shapes(cfg, mode)}
    if set(expected) != set(arrays):
        missing = sorted(set(expected) - set(arrays))
        extra = sorted(set(arrays) - set(expected))
        raise DataError(f"{path}: parameter names disagree with config (missing {missing}, unexpected {extra})")
    for name, shape in expected.items():
        if arrays[name].shape != tuple(shape):
            raise DataError(f"{path}: {name} has shape {arrays[name].shape}, expected {shape}")
    tensors = {name: Tensor(arrays[name], requires_grad=True, name=name) for name in expected}
    return ModelParams(cfg, mode, tensors)
