"""Named-tensor weight files.

Layout (all little-endian)::

    b"UHDW"  version:u16  count:u32
    count x { name_len:u16  name:utf-8  rank:u8  dims:u32[rank]  data:f32[prod(dims)] }

Tensor names are dotted paths such as ``layers.3.attn.wq`` or ``stem.pos``.
"""

from __future__ import annotations

import dataclasses
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Optional, Union

import numpy as np

from .compressor import CompressorWeights
from .connector import MlpConnectorWeights, ResamplerWeights
from .encoder import LayerWeights, StemWeights
from .errors import ConfigError
from .numerics import AttentionWeights

MAGIC = b"UHDW"
VERSION = 1

PathLike = Union[str, Path]


def write_tensors(f: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    f.write(MAGIC)
    f.write(struct.pack("<HI", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        if arr.ndim > 255:
            raise ConfigError(f"tensor {name} has too many dims")
        f.write(struct.pack("<H", len(raw)))
        f.write(raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(np.asarray(arr.shape, dtype="<u4").tobytes())
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensors(f: BinaryIO) -> dict[str, np.ndarray]:
    def take(n: int) -> bytes:
        b = f.read(n)
        if len(b) != n:
            raise ConfigError("weight file ended unexpectedly")
        return b

    if take(4) != MAGIC:
        raise ConfigError("not a UHDW weight file")
    version, count = struct.unpack("<HI", take(6))
    if version != VERSION:
        raise ConfigError(f"unsupported weight file version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = tuple(int(x) for x in np.frombuffer(take(4 * rank), dtype="<u4"))
        n = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
    return out


def save_tensors(path: PathLike, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        write_tensors(f, tensors)


def load_tensors(path: PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_tensors(f)


# ------------------------------------------------------ dataclass <-> names

_NESTED = {"attn": AttentionWeights, "win_attn": AttentionWeights, "cross_attn": AttentionWeights}


def flatten(obj, prefix: str, out: Optional[dict] = None) -> dict[str, np.ndarray]:
    out = {} if out is None else out
    for f in dataclasses.fields(obj):
        value = getattr(obj, f.name)
        key = f"{prefix}.{f.name}"
        if value is None:
            continue
        if dataclasses.is_dataclass(value):
            flatten(value, key, out)
        else:
            out[key] = np.asarray(value)
    return out


def unflatten(cls, tensors: dict[str, np.ndarray], prefix: str):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = f"{prefix}.{f.name}"
        if key in tensors:
            kwargs[f.name] = tensors[key]
        elif f.name in _NESTED and any(k.startswith(key + ".") for k in tensors):
            kwargs[f.name] = unflatten(_NESTED[f.name], tensors, key)
        elif f.default is not dataclasses.MISSING:
            kwargs[f.name] = f.default
        else:
            raise ConfigError(f"weight file is missing {key}")
    return cls(**kwargs)


@dataclass
class ModelWeights:
    stem: StemWeights
    layers: list[LayerWeights]
    compressor: Optional[CompressorWeights] = None
    connector: Union[MlpConnectorWeights, ResamplerWeights, None] = None

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = flatten(self.stem, "stem")
        for i, layer in enumerate(self.layers):
            flatten(layer, f"layers.{i}", out)
        if self.compressor is not None:
            flatten(self.compressor, "compressor", out)
        if self.connector is not None:
            flatten(self.connector, "connector", out)
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "ModelWeights":
        n_layers = 0
        while f"layers.{n_layers}.f1" in tensors:
            n_layers += 1
        compressor = None
        if any(k.startswith("compressor.") for k in tensors):
            compressor = unflatten(CompressorWeights, tensors, "compressor")
        connector = None
        if "connector.w1" in tensors:
            connector = unflatten(MlpConnectorWeights, tensors, "connector")
        elif "connector.queries" in tensors:
            connector = unflatten(ResamplerWeights, tensors, "connector")
        return cls(
            stem=unflatten(StemWeights, tensors, "stem"),
            layers=[unflatten(LayerWeights, tensors, f"layers.{i}") for i in range(n_layers)],
            compressor=compressor,
            connector=connector,
        )


def save_model(path: PathLike, weights: ModelWeights) -> None:
    save_tensors(path, weights.to_tensors())


def load_model(path: PathLike) -> ModelWeights:
    return ModelWeights.from_tensors(load_tensors(path))
