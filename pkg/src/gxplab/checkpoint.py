"""Binary checkpoint container.

Layout (all integers little-endian unsigned 32-bit unless noted):
    magic "GXP1" (4 bytes)
    precision code (1 byte): 4 = float32, 8 = float64
    architecture id: length + utf-8 bytes
    parameter count
    per parameter: name length + utf-8 name, rank, extents, raw little-endian
    values in the declared precision.

Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

MAGIC = b"GXP1"
_PRECISION = {4: np.dtype("<f4"), 8: np.dtype("<f8")}


def save_checkpoint(path, model) -> None:
    """Serialize a model's parameters in registry order."""
    params = {k: v.data for k, v in model.parameters().items()}
    dtypes = {a.dtype.itemsize for a in params.values()}
    if len(dtypes) != 1:
        raise ValueError(f"mixed parameter precisions {sorted(dtypes)}; checkpoint declares one")
    itemsize = dtypes.pop()
    if itemsize not in _PRECISION:
        raise ValueError(f"unsupported precision ({itemsize} bytes per value)")

    chunks = [MAGIC, struct.pack("<B", itemsize)]
    arch = model.architecture_id.encode("utf-8")
    chunks.append(struct.pack("<I", len(arch)))
    chunks.append(arch)
    chunks.append(struct.pack("<I", len(params)))
    for name, arr in params.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype=_PRECISION[itemsize]).tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ValueError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, "
                f"file has {len(self.blob)}"
            )
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path) -> tuple[str, dict[str, np.ndarray]]:
    """Read a checkpoint; returns (architecture id, name -> array)."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    magic = r.take(4)
    if magic != MAGIC:
        raise ValueError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    itemsize = struct.unpack("<B", r.take(1))[0]
    if itemsize not in _PRECISION:
        raise ValueError(f"bad precision code {itemsize} at offset 4")
    dtype = _PRECISION[itemsize]
    arch = r.take(r.u32()).decode("utf-8")
    params: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(shape)) if rank else 1
        raw = r.take(n * itemsize)
        params[name] = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    if r.pos != len(r.blob):
        raise ValueError(f"trailing bytes at offset {r.pos}")
    return arch, params


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
