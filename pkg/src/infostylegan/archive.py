"""Binary tensor archive used for checkpoints and datasets.

Layout (little-endian)::

    b"ISGN"  u32 version(=1)  u32 count
    count x { u16 name_len, name (UTF-8), u8 rank, rank x u32 dim, float64 payload }
"""
from __future__ import annotations

import struct
from typing import Dict, Mapping

import numpy as np

MAGIC = b"ISGN"
VERSION = 1


class ArchiveError(ValueError):
    pass


def write_archive(path, tensors: Mapping[str, np.ndarray]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ArchiveError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ArchiveError(f"tensor {name!r}: rank {arr.ndim} too large")
        chunks.append(struct.pack("<H", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr).astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


def read_archive(path) -> Dict[str, np.ndarray]:
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_archive(buf, str(path))


def parse_archive(buf: bytes, label: str = "<bytes>") -> Dict[str, np.ndarray]:
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise ArchiveError(f"{label}: truncated while reading {what} at byte {pos}")
        out = buf[pos:pos + n]
        pos += n
        return out

    magic = take(4, "magic")
    if magic != MAGIC:
        raise ArchiveError(f"{label}: bad magic {magic!r} (expected {MAGIC!r})")
    version, count = struct.unpack("<II", take(8, "header"))
    if version != VERSION:
        raise ArchiveError(f"{label}: unsupported version {version} (expected {VERSION})")
    out: Dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"name length of tensor {i}"))
        try:
            name = take(name_len, f"name of tensor {i}").decode("utf-8")
        except UnicodeDecodeError:
            raise ArchiveError(f"{label}: tensor {i} name is not valid UTF-8") from None
        (rank,) = struct.unpack("<B", take(1, f"rank of {name!r}"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, f"dims of {name!r}"))
        size = int(np.prod(dims)) if rank else 1
        payload = take(8 * size, f"payload of {name!r}")
        out[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(buf):
        raise ArchiveError(f"{label}: {len(buf) - pos} trailing bytes after {count} tensors")
    return out
