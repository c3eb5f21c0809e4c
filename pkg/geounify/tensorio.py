"""
Binary tensor files and small export helpers.

GUTN layout (little-endian):
  b"GUTN" | u32 version=1 | u32 rank | rank x u32 dims | f32 payload (row-major)
"""

from __future__ import annotations
import hashlib
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError

MAGIC = b"GUTN"
VERSION = 1
PathLike = Union[str, Path]


def encode_tensor(arr) -> bytes:
    a = np.ascontiguousarray(np.asarray(arr), dtype="<f4")
    head = MAGIC + struct.pack("<II", VERSION, a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes(order="C")


def decode_tensor(buf: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(buf) < 12 or buf[:4] != MAGIC:
        raise FormatError(f"{source}: not a GUTN tensor (bad magic)")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise FormatError(f"{source}: GUTN version {version} unsupported (expected {VERSION})")
    off = 12 + 4 * rank
    if len(buf) < off:
        raise FormatError(f"{source}: truncated GUTN header")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    n = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 4 * n:
        raise FormatError(f"{source}: payload is {len(buf) - off} bytes, expected {4 * n}")
    return np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32).reshape(dims)


def write_tensor(path: PathLike, arr) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_tensor(arr))
    return path


def read_tensor(path: PathLike) -> np.ndarray:
    path = Path(path)
    try:
        buf = path.read_bytes()
    except FileNotFoundError:
        raise FormatError(f"missing tensor file: {path}") from None
    return decode_tensor(buf, str(path))


def write_pgm(path: PathLike, img2d) -> Path:
    """Grayscale P5 export, min-max scaled to 0..255."""
    a = np.asarray(img2d, dtype=np.float64)
    lo, hi = float(a.min()), float(a.max())
    scaled = np.zeros(a.shape) if hi <= lo else (a - lo) / (hi - lo)
    px = np.round(scaled * 255.0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(f"P5\n{px.shape[1]} {px.shape[0]}\n255\n".encode("ascii") + px.tobytes())
    return path


def sha256_file(path: PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
