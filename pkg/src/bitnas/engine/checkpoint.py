"""Binary checkpoint format for named float32 tensors.

Layout, all integers little-endian u32:

    magic  b"DNASCKPT"
    version (= 1)
    tensor count
    per tensor: name length, UTF-8 name, rank, dims[rank], raw LE float32 data

Round-trips are bit-exact; values are stored as float32 regardless of the
in-memory dtype, so save followed by load reproduces f32 state exactly.
"""

from __future__ import annotations

import struct
from typing import Dict

import numpy as np

MAGIC = b"DNASCKPT"
VERSION = 1

__all__ = ["save_checkpoint", "load_checkpoint", "MAGIC", "VERSION"]


def save_checkpoint(path, tensors: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<II", VERSION, len(tensors)))
        for name, arr in tensors.items():
            # asarray, not ascontiguousarray: the latter promotes rank 0 to rank 1
            data = np.asarray(arr, dtype="<f4")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", data.ndim))
            f.write(struct.pack(f"<{data.ndim}I", *data.shape))
            f.write(data.tobytes())


def load_checkpoint(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != MAGIC:
        raise ValueError(f"not a checkpoint file: bad magic {blob[:8]!r}")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 16
    out: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (rank,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        dims = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=offset).reshape(dims)
        offset += 4 * n
        out[name] = arr.astype(np.float32)
    if offset != len(blob):
        raise ValueError(f"trailing bytes in checkpoint: {len(blob) - offset}")
    return out
