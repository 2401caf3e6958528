"""``OFTN`` tensor container and PNG writers.

Tensor layout (little-endian): magic ``OFTN``, u32 version, u32 rank,
u32 dims[rank], then the float32 payload in row-major order.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import FormatError

TENSOR_MAGIC = b"OFTN"
TENSOR_VERSION = 1


def tensor_to_bytes(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<4sII", TENSOR_MAGIC, TENSOR_VERSION, arr.ndim)
    return head + struct.pack(f"<{arr.ndim}I", *arr.shape) + arr.tobytes()


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < 12:
        raise FormatError("tensor container shorter than its header")
    magic, version, rank = struct.unpack_from("<4sII", buf)
    if magic != TENSOR_MAGIC:
        raise FormatError(f"bad tensor magic {magic!r}")
    if version != TENSOR_VERSION:
        raise FormatError(f"unsupported tensor version {version}")
    if len(buf) < 12 + 4 * rank:
        raise FormatError("tensor container truncated inside dims")
    dims = struct.unpack_from(f"<{rank}I", buf, 12)
    off = 12 + 4 * rank
    count = int(np.prod(dims)) if rank else 1
    if len(buf) != off + 4 * count:
        raise FormatError(f"tensor payload is {len(buf) - off} bytes, expected {4 * count}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims).astype(np.float32)


def write_tensor(path, arr: np.ndarray) -> None:
    Path(path).write_bytes(tensor_to_bytes(arr))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


def write_rgb_png(path, rgb: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(img).save(path, format="PNG")


def write_id_png(path, ids: np.ndarray) -> None:
    ids = np.asarray(ids)
    if ids.min(initial=0) < 0 or ids.max(initial=0) > 0xFFFF:
        raise ValueError("id image values must fit in u16")
    Image.fromarray(ids.astype(np.uint16)).save(path, format="PNG")


def read_id_png(path) -> np.ndarray:
    return np.array(Image.open(path)).astype(np.int64)


def read_rgb_png(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float64) / 255.0


def write_heatmap_png(path, scores: np.ndarray, lo: float = -1.0, hi: float = 1.0) -> None:
    """Linear gray heatmap, ``lo`` -> black and ``hi`` -> white."""
    g = np.clip((np.asarray(scores, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    Image.fromarray(np.round(g * 255.0).astype(np.uint8)).save(path, format="PNG")
