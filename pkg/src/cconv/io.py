"""Binary tensor containers (CCT1, CCKP) and netpbm images.

CCT1: ``b"CCT1"``, u32 version, u32 ndims, ndims x u64 dims, f32 payload.
CCKP: ``b"CCKP"``, u32 version, u32 count, then per tensor a u32 name
length, the UTF-8 name and an embedded CCT1 record. Everything is
little-endian.
"""

from __future__ import annotations

import io as _io
import os
import struct
from typing import BinaryIO, Mapping

import numpy as np

CCT1_MAGIC = b"CCT1"
CCKP_MAGIC = b"CCKP"
VERSION = 1


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError(f"unexpected end of file: wanted {n} bytes, got {len(b)}")
    return b


def write_cct1(f: BinaryIO, arr) -> None:
    arr = np.asarray(arr)
    f.write(CCT1_MAGIC)
    f.write(struct.pack("<II", VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_cct1(f: BinaryIO) -> np.ndarray:
    magic = _read_exact(f, 4)
    if magic != CCT1_MAGIC:
        raise FormatError(f"bad CCT1 magic {magic!r}")
    version, ndims = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported CCT1 version {version}")
    dims = struct.unpack(f"<{ndims}Q", _read_exact(f, 8 * ndims))
    count = int(np.prod(dims, dtype=np.int64)) if ndims else 1
    payload = _read_exact(f, 4 * count)
    return np.frombuffer(payload, dtype="<f4").reshape(dims).astype(np.float32)


def save_tensor(path, arr) -> None:
    with open(path, "wb") as f:
        write_cct1(f, arr)


def load_tensor(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_cct1(f)


def write_cckp(f: BinaryIO, tensors: Mapping[str, np.ndarray]) -> None:
    f.write(CCKP_MAGIC)
    f.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        f.write(struct.pack("<I", len(raw)))
        f.write(raw)
        write_cct1(f, arr)


def read_cckp(f: BinaryIO) -> dict[str, np.ndarray]:
    magic = _read_exact(f, 4)
    if magic != CCKP_MAGIC:
        raise FormatError(f"bad CCKP magic {magic!r}")
    version, count = struct.unpack("<II", _read_exact(f, 8))
    if version != VERSION:
        raise FormatError(f"unsupported CCKP version {version}")
    out = {}
    for _ in range(count):
        (n,) = struct.unpack("<I", _read_exact(f, 4))
        name = _read_exact(f, n).decode("utf-8")
        out[name] = read_cct1(f)
    return out


def save_checkpoint(path, tensors: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        write_cckp(f, tensors)


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return read_cckp(f)


# netpbm ---------------------------------------------------------------------


def _tokens(data: bytes, pos: int, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    out = []
    n = len(data)
    while len(out) < count:
        while pos < n and data[pos : pos + 1].isspace():
            pos += 1
        if pos < n and data[pos : pos + 1] == b"#":
            while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        out.append(int(data[start:pos]))
    return out, pos


def read_netpbm(path) -> np.ndarray:
    """Read P2/P3/P5/P6 into float32 in [0, 1]; shape [H,W] or [H,W,3]."""
    with open(path, "rb") as f:
        data = f.read()
    magic = data[:2]
    if magic not in (b"P2", b"P3", b"P5", b"P6"):
        raise FormatError(f"{os.fspath(path)}: not a PGM/PPM file (magic {magic!r})")
    (w, h, maxval), pos = _tokens(data, 2, 3)
    if not 0 < maxval < 65536:
        raise FormatError(f"bad maxval {maxval}")
    channels = 3 if magic in (b"P3", b"P6") else 1
    count = w * h * channels
    if magic in (b"P2", b"P3"):
        vals, _ = _tokens(data, pos, count)
        arr = np.array(vals, dtype=np.float64)
    else:
        pos += 1  # single whitespace after maxval
        dt = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos : pos + count * dt.itemsize]
        if len(raw) != count * dt.itemsize:
            raise FormatError("truncated netpbm raster")
        arr = np.frombuffer(raw, dtype=dt).astype(np.float64)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return (arr / maxval).astype(np.float32)


def write_netpbm(path, img, binary: bool = True) -> None:
    """Write a [H,W] (PGM) or [H,W,3] (PPM) image with values in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    q = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    color = q.ndim == 3
    h, w = q.shape[:2]
    magic = {(False, False): b"P2", (True, False): b"P3", (False, True): b"P5", (True, True): b"P6"}[
        (color, binary)
    ]
    buf = _io.BytesIO()
    buf.write(magic + b"\n%d %d\n255\n" % (w, h))
    if binary:
        buf.write(q.tobytes())
    else:
        per_row = q.reshape(h, -1)
        for row in per_row:
            buf.write(b" ".join(b"%d" % v for v in row) + b"\n")
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def normalize_to_unit(img: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; constant images map to 0.5."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = float(img.min()), float(img.max())
    if hi - lo <= 0:
        return np.full_like(img, 0.5)
    return (img - lo) / (hi - lo)
