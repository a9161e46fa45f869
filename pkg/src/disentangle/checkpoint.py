"""CDL1 tensor block files plus JSON sidecars.

Layout: magic ``CDL1``, u32 version, u32 tensor count, then per tensor a u16
name length, UTF-8 name, u8 rank, u64 dims and a little-endian f32 row-major
payload.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CDL1"
VERSION = 1


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def encode_tensors(tensors: dict[str, torch.Tensor]) -> bytes:
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, t in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(t.detach().cpu().numpy(), dtype="<f4")  # ascontiguousarray would promote 0-d to 1-d
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


def decode_tensors(data: bytes) -> dict[str, torch.Tensor]:
    if data[:4] != MAGIC:
        raise CheckpointError("bad magic, not a CDL1 file")
    version, count = struct.unpack_from("<II", data, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported CDL1 version {version}")
    off = 12
    out: dict[str, torch.Tensor] = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        dims = struct.unpack_from(f"<{rank}Q", data, off)
        off += 8 * rank
        size = int(np.prod(dims, dtype=np.int64)) if rank else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims)
        off += 4 * size
        out[name] = torch.from_numpy(arr.astype(np.float32))
    if off != len(data):
        raise CheckpointError(f"{len(data) - off} trailing bytes")
    return out


def save_tensors(path, tensors: dict[str, torch.Tensor]) -> None:
    atomic_write_bytes(path, encode_tensors(tensors))


def load_tensors(path) -> dict[str, torch.Tensor]:
    return decode_tensors(Path(path).read_bytes())
