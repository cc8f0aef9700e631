"""Seeded randomness, parameter storage and the binary checkpoint container."""

from __future__ import annotations

import hashlib
import json
import math
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Value

MAGIC = b"SGQA"
FORMAT_VERSION = 1
_MASK64 = (1 << 64) - 1


class CheckpointError(ValueError):
    """The checkpoint file is malformed or does not match expectations."""


def path_key(path: str) -> int:
    return int.from_bytes(hashlib.sha256(path.encode("utf-8")).digest()[:8], "little")


def rng_for(seed: int, path: str) -> np.random.Generator:
    """Independent generator for ``path`` under ``seed``.

    Streams for different paths never depend on the order they are requested in.
    """
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & _MASK64, path_key(path)])))


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return math.sqrt(6.0 / (fan_in + fan_out))


class Params:
    """Learnable arrays addressed by stable ``/``-separated paths.

    ``buffers`` hold non-learned state that must still travel with a
    checkpoint (batch-norm running statistics).
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.values: OrderedDict[str, Value] = OrderedDict()
        self.buffers: OrderedDict[str, np.ndarray] = OrderedDict()

    def __getitem__(self, path: str) -> Value:
        return self.values[path]

    def __contains__(self, path: str) -> bool:
        return path in self.values

    def __iter__(self) -> Iterator[str]:
        return iter(self.values)

    def __len__(self) -> int:
        return len(self.values)

    def items(self):
        return self.values.items()

    def add(self, path: str, shape, init: str = "glorot", scale: float = 0.1) -> Value:
        if path in self.values:
            raise KeyError(f"duplicate parameter path {path!r}")
        shape = tuple(int(s) for s in shape)
        rng = rng_for(self.seed, "init/" + path)
        if init == "glorot":
            fan_in, fan_out = (shape[0], shape[-1]) if len(shape) > 1 else (shape[0], shape[0])
            a = glorot_bound(fan_in, fan_out)
            data = rng.uniform(-a, a, size=shape)
        elif init == "zeros":
            data = np.zeros(shape)
        elif init == "ones":
            data = np.ones(shape)
        elif init == "uniform":
            data = rng.uniform(-scale, scale, size=shape)
        elif init == "normal":
            data = rng.normal(0.0, scale, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        v = Value(data, requires_grad=True, name=path)
        self.values[path] = v
        return v

    def add_buffer(self, path: str, data: np.ndarray) -> np.ndarray:
        arr = np.array(data, dtype=np.float64)
        self.buffers[path] = arr
        return arr

    def zero_grad(self) -> None:
        for v in self.values.values():
            v.grad = None

    def arrays(self) -> OrderedDict[str, np.ndarray]:
        """All learnable arrays and buffers (buffers prefixed ``buffer/``)."""
        out: OrderedDict[str, np.ndarray] = OrderedDict((k, v.data) for k, v in self.values.items())
        for k, b in self.buffers.items():
            out["buffer/" + k] = b
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.values) | {"buffer/" + k for k in self.buffers}
        missing = expected - set(arrays)
        if missing:
            raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
        for k, v in self.values.items():
            if arrays[k].shape != v.shape:
                raise CheckpointError(f"shape mismatch for {k}: {arrays[k].shape} vs {v.shape}")
            v.data[...] = arrays[k]
        for k, b in self.buffers.items():
            b[...] = arrays["buffer/" + k]


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray]) -> None:
    """Write ``arrays`` into the single-file container.

    Layout: ``SGQA`` | u32 version | u32 header length | JSON header |
    little-endian float64 payloads in header order.
    """
    entries = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        entries.append({"path": name, "shape": list(arr.shape), "byte_offset": offset})
        offset += arr.size * 8
    header = json.dumps(entries, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", FORMAT_VERSION, len(header)))
        fh.write(header)
        for arr in arrays.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_arrays(path: str | Path) -> OrderedDict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes {blob[:4]!r}")
    if len(blob) < 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported container version {version}")
    try:
        entries = json.loads(blob[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    base = 12 + hlen
    total = sum(8 * math.prod(e["shape"]) for e in entries)
    if len(blob) != base + total:
        raise CheckpointError(f"{path}: expected {base + total} bytes, found {len(blob)}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in entries:
        n = math.prod(e["shape"])
        start = base + e["byte_offset"]
        arr = np.frombuffer(blob, dtype="<f8", count=n, offset=start)
        out[e["path"]] = arr.astype(np.float64).reshape(e["shape"])
    return out
