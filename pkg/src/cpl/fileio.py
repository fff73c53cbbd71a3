"""Raw tensor files and binary pixmaps.

Tensor file layout: 8-byte magic, little-endian u64 header length, a JSON
header ``{"version", "shape", "dtype"}``, then the little-endian values.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

TENSOR_MAGIC = b"CPLTNSR\x00"
TENSOR_VERSION = 1


class TensorFileError(ValueError):
    pass


def tensor_bytes(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype.kind not in "fiub":
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    arr = arr.astype(arr.dtype.newbyteorder("<"), order="C", copy=False)
    header = json.dumps({"version": TENSOR_VERSION, "shape": list(arr.shape), "dtype": arr.dtype.str}, sort_keys=True)
    hb = header.encode("utf-8")
    return TENSOR_MAGIC + struct.pack("<Q", len(hb)) + hb + arr.tobytes()


def parse_tensor(buf: bytes) -> np.ndarray:
    if len(buf) < 16 or buf[:8] != TENSOR_MAGIC:
        raise TensorFileError("not a tensor file (bad magic)")
    (hlen,) = struct.unpack("<Q", buf[8:16])
    try:
        header = json.loads(buf[16 : 16 + hlen].decode("utf-8"))
        version, shape, dtype = header["version"], tuple(header["shape"]), np.dtype(header["dtype"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise TensorFileError(f"corrupt tensor header: {exc}") from None
    if version != TENSOR_VERSION:
        raise TensorFileError(f"unsupported tensor file version {version!r}")
    blob = buf[16 + hlen :]
    need = int(np.prod(shape)) * dtype.itemsize
    if len(blob) != need:
        raise TensorFileError(f"tensor blob has {len(blob)} bytes, header implies {need}")
    return np.frombuffer(blob, dtype=dtype).reshape(shape).copy()


def write_tensor(path, arr: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(tensor_bytes(arr))
    return path


def read_tensor(path) -> np.ndarray:
    return parse_tensor(Path(path).read_bytes())


def pixmap_bytes(img: np.ndarray) -> bytes:
    """P5 for a 2-d array, P6 for 3 x H x W; floats are read as [0, 1]."""
    a = np.asarray(img)
    if a.dtype != np.uint8:
        a = np.round(np.clip(a.astype(np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    if a.ndim == 2:
        magic, body = b"P5", a
    elif a.ndim == 3 and a.shape[0] == 3:
        magic, body = b"P6", np.transpose(a, (1, 2, 0))
    elif a.ndim == 3 and a.shape[0] == 1:
        magic, body = b"P5", a[0]
    else:
        raise ValueError(f"pixmap needs H x W or 3 x H x W, got {a.shape}")
    h, w = body.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(body).tobytes()


def write_pixmap(path, img: np.ndarray) -> Path:
    path = Path(path)
    path.write_bytes(pixmap_bytes(img))
    return path


def read_pixmap(path) -> np.ndarray:
    """uint8 array, H x W for P5 and 3 x H x W for P6."""
    buf = Path(path).read_bytes()
    parts = buf.split(maxsplit=4)
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255 or magic not in (b"P5", b"P6"):
        raise ValueError("only 8-bit P5/P6 pixmaps are supported")
    ch = 3 if magic == b"P6" else 1
    data = np.frombuffer(buf[len(buf) - w * h * ch :], dtype=np.uint8)
    return data.reshape(h, w) if ch == 1 else data.reshape(h, w, 3).transpose(2, 0, 1).copy()
