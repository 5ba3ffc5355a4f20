"""GFS1 frame-sequence files and named-tensor checkpoint files.

GFS1 layout (all little-endian)::

    b"GFS1"  u16 version  u32 T  u32 C  u32 H  u32 W
    C x (u32 byte length, UTF-8 channel name)
    u8 dtype tag (1 = f32, 2 = f64)
    T*C*H*W values, row-major, frame-major then channel

Checkpoints reuse the same conventions::

    b"GCK1"  u16 version  u32 metadata length, UTF-8 JSON metadata
    u32 tensor count
    per tensor: u32 name length, UTF-8 name, u8 dtype tag, u32 ndim,
                ndim x u32 dims, values
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["GFSFormatError", "write_gfs", "read_gfs", "write_checkpoint", "read_checkpoint"]

GFS_MAGIC = b"GFS1"
CKPT_MAGIC = b"GCK1"
VERSION = 1
DTYPE_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
TAG_OF = {np.dtype("float32"): 1, np.dtype("float64"): 2}


class GFSFormatError(ValueError):
    pass


def _name_bytes(name):
    raw = name.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_exact(fh, n, what):
    data = fh.read(n)
    if len(data) != n:
        raise GFSFormatError(f"truncated file while reading {what}")
    return data


def _read_name(fh):
    (n,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
    return _read_exact(fh, n, "name").decode("utf-8")


def _tag(dtype):
    try:
        return TAG_OF[np.dtype(dtype)]
    except KeyError:
        raise GFSFormatError(f"unsupported dtype {dtype}; use float32 or float64") from None


def write_gfs(path, frames, channel_names=None, dtype=None):
    """Write a ``(T, C, H, W)`` array.  ``dtype`` defaults to the array's own."""
    frames = np.asarray(frames)
    if frames.ndim != 4:
        raise GFSFormatError(f"GFS1 stores T x C x H x W arrays, got shape {frames.shape}")
    dtype = np.dtype(dtype or frames.dtype)
    tag = _tag(dtype)
    t, c, h, w = frames.shape
    names = list(channel_names) if channel_names is not None else [f"ch{k}" for k in range(c)]
    if len(names) != c:
        raise GFSFormatError(f"{c} channels but {len(names)} channel names")
    header = GFS_MAGIC + struct.pack("<HIIII", VERSION, t, c, h, w)
    header += b"".join(_name_bytes(n) for n in names) + struct.pack("<B", tag)
    payload = np.ascontiguousarray(frames, dtype=DTYPE_TAGS[tag]).tobytes()
    Path(path).write_bytes(header + payload)


def read_gfs(path):
    """Return ``(frames, channel_names)``; raises on any size mismatch."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != GFS_MAGIC:
            raise GFSFormatError(f"{path}: not a GFS1 file")
        version, t, c, h, w = struct.unpack("<HIIII", _read_exact(fh, 18, "header"))
        if version != VERSION:
            raise GFSFormatError(f"{path}: unsupported GFS1 version {version}")
        names = [_read_name(fh) for _ in range(c)]
        (tag,) = struct.unpack("<B", _read_exact(fh, 1, "dtype tag"))
        if tag not in DTYPE_TAGS:
            raise GFSFormatError(f"{path}: unknown dtype tag {tag}")
        dtype = DTYPE_TAGS[tag]
        payload = fh.read()
    expected = t * c * h * w * dtype.itemsize
    if len(payload) != expected:
        raise GFSFormatError(f"{path}: payload is {len(payload)} bytes, header implies {expected}")
    frames = np.frombuffer(payload, dtype=dtype).reshape(t, c, h, w)
    return frames.astype(dtype.newbyteorder("="), copy=True), names


def write_checkpoint(path, tensors: dict, metadata: dict | None = None):
    meta = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<HI", VERSION, len(meta)), meta,
             struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        tag = _tag(arr.dtype)
        parts.append(_name_bytes(name))
        parts.append(struct.pack("<BI", tag, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[tag]).tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path):
    """Return ``(tensors, metadata)`` with tensors in file order."""
    with open(path, "rb") as fh:
        if _read_exact(fh, 4, "magic") != CKPT_MAGIC:
            raise GFSFormatError(f"{path}: not a checkpoint file")
        version, meta_len = struct.unpack("<HI", _read_exact(fh, 6, "header"))
        if version != VERSION:
            raise GFSFormatError(f"{path}: unsupported checkpoint version {version}")
        metadata = json.loads(_read_exact(fh, meta_len, "metadata").decode("utf-8"))
        (count,) = struct.unpack("<I", _read_exact(fh, 4, "tensor count"))
        tensors = {}
        for _ in range(count):
            name = _read_name(fh)
            tag, ndim = struct.unpack("<BI", _read_exact(fh, 5, "tensor header"))
            if tag not in DTYPE_TAGS:
                raise GFSFormatError(f"{path}: unknown dtype tag {tag} for {name!r}")
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            dtype = DTYPE_TAGS[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            raw = _read_exact(fh, nbytes, f"tensor {name!r}")
            tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(
                dtype.newbyteorder("="), copy=True)
        if fh.read(1):
            raise GFSFormatError(f"{path}: trailing bytes after last tensor")
    return tensors, metadata
