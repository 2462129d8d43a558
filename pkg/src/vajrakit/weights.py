"""Named tensor bundles and the bit-exact binary weight format.

File layout: magic ``VJW1``, u32 little-endian tensor count, then per tensor
a u16 name length + UTF-8 name, u8 rank, rank x u32 dims, and the
dims-product of float32 little-endian values. Roundtrips are bit-exact.
"""
from __future__ import annotations

import struct

import numpy as np

from .tensor import DTYPE

MAGIC = b"VJW1"
_U32_MAX = 2**32 - 1


class WeightFormatError(ValueError):
    """Weight file violates the format."""


class WeightStore:
    """Ordered map of unique names to float32 arrays."""

    def __init__(self):
        self._data: dict[str, np.ndarray] = {}

    def add(self, name: str, arr: np.ndarray) -> None:
        if name in self._data:
            raise WeightFormatError(f"duplicate tensor name {name!r}")
        # always copy: stores must not alias live model arrays
        self._data[name] = np.array(arr, dtype=DTYPE, order="C", copy=True)

    def __contains__(self, name):
        return name in self._data

    def __getitem__(self, name) -> np.ndarray:
        return self._data[name]

    def __len__(self):
        return len(self._data)

    def names(self):
        return list(self._data)

    def items(self):
        return self._data.items()

    def save(self, path) -> None:
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<I", len(self._data)))
            for name, arr in self._data.items():
                encoded = name.encode("utf-8")
                if len(encoded) > 0xFFFF:
                    raise WeightFormatError(f"name too long: {name[:32]!r}...")
                if arr.ndim > 0xFF:
                    raise WeightFormatError(f"rank {arr.ndim} exceeds u8")
                if any(d > _U32_MAX for d in arr.shape):
                    raise WeightFormatError(f"dimension overflow in {name!r}: {arr.shape}")
                f.write(struct.pack("<H", len(encoded)))
                f.write(encoded)
                f.write(struct.pack("<B", arr.ndim))
                f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
                f.write(arr.astype("<f4", copy=False).tobytes())

    @classmethod
    def load(cls, path) -> "WeightStore":
        with open(path, "rb") as f:
            buf = f.read()
        if buf[:4] != MAGIC:
            raise WeightFormatError(f"bad magic {buf[:4]!r}, want {MAGIC!r}")
        store = cls()
        off = 4
        try:
            (count,) = struct.unpack_from("<I", buf, off)
            off += 4
            for _ in range(count):
                (name_len,) = struct.unpack_from("<H", buf, off)
                off += 2
                name = buf[off:off + name_len].decode("utf-8")
                if len(buf[off:off + name_len]) != name_len:
                    raise struct.error("short name")
                off += name_len
                (rank,) = struct.unpack_from("<B", buf, off)
                off += 1
                dims = struct.unpack_from(f"<{rank}I", buf, off)
                off += 4 * rank
                size = 1
                for d in dims:
                    size *= d
                raw = buf[off:off + 4 * size]
                if len(raw) != 4 * size:
                    raise struct.error("short tensor data")
                off += 4 * size
                arr = np.frombuffer(raw, dtype="<f4").reshape(dims).astype(DTYPE)
                store.add(name, arr)
        except struct.error as e:
            raise WeightFormatError(f"truncated weight file: {e}") from None
        if off != len(buf):
            raise WeightFormatError(f"{len(buf) - off} trailing bytes after last tensor")
        return store


def init_weights(graph, seed: int) -> WeightStore:
    """Deterministic store for a graph: conv kernels drawn fan-in-scaled
    uniform from a seeded generator in parameter-site order; biases zero;
    batchnorm at identity statistics (gamma 1, beta 0, mean 0, var 1)."""
    from .graph import Model  # local import: graph.py builds on blocks only

    rng = np.random.default_rng(seed)
    model = Model(graph)
    store = WeightStore()
    for name, arr, is_stat in model.named_arrays():
        if not is_stat and arr.ndim == 4:
            fan_in = arr.shape[1] * arr.shape[2] * arr.shape[3]
            bound = 1.0 / np.sqrt(fan_in)
            arr[...] = rng.uniform(-bound, bound, size=arr.shape).astype(DTYPE)
        # 1-dim arrays keep their constructed values: biases and BN beta/mean
        # zero, BN gamma/var one
        store.add(name, arr)
    return store


def collect_weights(model) -> WeightStore:
    """Snapshot a model's current arrays into a store."""
    store = WeightStore()
    for name, arr, _ in model.named_arrays():
        store.add(name, arr)
    return store
