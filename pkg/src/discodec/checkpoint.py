"""Binary tensor-table persistence with integrity checking.

Layout, all integers little-endian:

    magic   4 bytes  b"SSVC"
    version u32
    count   u32
    entry*  name-length u32, name UTF-8, rank u32, shape u32*rank,
            float32 values row-major
    digest  8 bytes, blake2b over every preceding byte

Writes go to a temporary file in the target directory followed by an atomic
rename, so readers never observe a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import os
import struct
import tempfile

import numpy as np

MAGIC = b"SSVC"
VERSION = 1
_DIGEST_SIZE = 8


def _digest(blob: bytes) -> bytes:
    return hashlib.blake2b(blob, digest_size=_DIGEST_SIZE).digest()


def save_checkpoint(tensors: dict, path: str) -> None:
    """Write named float32 tensors to ``path`` atomically.

    Entry order follows dict insertion order, so identical inputs produce
    identical files.
    """
    parts = [MAGIC, struct.pack("<II", VERSION, len(tensors))]
    for name, value in tensors.items():
        # asarray keeps rank-0 inputs rank-0 where ascontiguousarray would not
        arr = np.asarray(value, dtype=np.float32)
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.astype("<f4", copy=False).tobytes())
    blob = b"".join(parts)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(blob)
            f.write(_digest(blob))
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.at = 0

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.blob):
            raise ValueError("corrupt file: truncated checkpoint")
        out = self.blob[self.at: self.at + n]
        self.at += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str) -> dict:
    """Read a checkpoint back into an ordered name -> float32 array dict."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < len(MAGIC) + _DIGEST_SIZE or raw[: len(MAGIC)] != MAGIC:
        raise ValueError("not a checkpoint")
    blob, digest = raw[:-_DIGEST_SIZE], raw[-_DIGEST_SIZE:]
    if _digest(blob) != digest:
        raise ValueError("corrupt file: checksum mismatch")
    r = _Reader(blob)
    r.take(len(MAGIC))
    version = r.u32()
    if version != VERSION:
        raise ValueError(f"unsupported version {version}")
    count = r.u32()
    tensors = {}
    for _ in range(count):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32() for _ in range(rank))
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        values = np.frombuffer(r.take(4 * n), dtype="<f4")
        tensors[name] = values.reshape(shape).astype(np.float32)
    if r.at != len(blob):
        raise ValueError("corrupt file: trailing bytes after tensor table")
    return tensors
