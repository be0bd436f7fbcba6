"""File formats: ``.mtt`` tensor containers, 16-bit PGM, key=value text.

``.mtt`` layout: magic ``MTT1``, one byte dtype code (0 f32, 1 f64,
2 complex64, 3 complex128), one byte rank, ``rank`` little-endian uint64
dims, then the row-major little-endian payload (complex as interleaved
re, im).
"""
from __future__ import annotations

import io
import os
import re
import struct
import tempfile
from pathlib import Path
from typing import Union

import numpy as np

PathLike = Union[str, os.PathLike]

MAGIC = b"MTT1"
_CODES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<c8"), 3: np.dtype("<c16")}
_BY_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1,
            np.dtype(np.complex64): 2, np.dtype(np.complex128): 3}


_PGM_HEADER = re.compile(rb"P5(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)(?:\s+|#[^\n]*\n)+(\d+)\s")


class FormatError(ValueError):
    pass


def atomic_write(path: PathLike, payload: bytes) -> None:
    """Write via a temp file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_mtt(arr: np.ndarray) -> bytes:
    arr = np.asarray(arr)
    if arr.dtype == np.bool_:
        arr = arr.astype(np.float32)
    if arr.dtype not in _BY_KIND:
        raise FormatError(f"unsupported dtype {arr.dtype}")
    code = _BY_KIND[arr.dtype]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<BB", code, arr.ndim))
    for d in arr.shape:
        buf.write(struct.pack("<Q", d))
    buf.write(np.ascontiguousarray(arr, dtype=_CODES[code]).tobytes())
    return buf.getvalue()


def decode_mtt(raw: bytes) -> np.ndarray:
    if raw[:4] != MAGIC:
        raise FormatError("bad magic, not an .mtt file")
    code, rank = struct.unpack_from("<BB", raw, 4)
    if code not in _CODES:
        raise FormatError(f"unknown dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", raw, 6)
    off = 6 + 8 * rank
    dt = _CODES[code]
    count = int(np.prod(dims)) if rank else 1
    if len(raw) - off != count * dt.itemsize:
        raise FormatError(f"payload length {len(raw) - off} does not match shape {dims}")
    arr = np.frombuffer(raw, dtype=dt, count=count, offset=off).reshape(dims)
    return arr.astype(dt.newbyteorder("="))


def save_mtt(path: PathLike, arr: np.ndarray) -> None:
    atomic_write(path, encode_mtt(arr))


def load_mtt(path: PathLike) -> np.ndarray:
    return decode_mtt(Path(path).read_bytes())


def encode_pgm(img: np.ndarray) -> bytes:
    """Binary 16-bit PGM of an image with values in [0, 1] (clipped)."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError(f"PGM needs a 2-D image, got shape {img.shape}")
    h, w = img.shape
    q = np.round(np.clip(img, 0.0, 1.0) * 65535).astype(">u2")
    return f"P5\n{w} {h}\n65535\n".encode("ascii") + q.tobytes()


def decode_pgm(raw: bytes) -> np.ndarray:
    # header tokens may carry comments; exactly one whitespace byte precedes the raster
    m = _PGM_HEADER.match(raw)
    if m is None:
        raise FormatError("not a binary PGM")
    w, h, maxval = (int(g) for g in m.groups())
    if not 0 < maxval < 65536:
        raise FormatError(f"PGM maxval {maxval} out of range")
    dt = ">u2" if maxval > 255 else "u1"
    n = w * h * np.dtype(dt).itemsize
    body = raw[m.end():]
    if len(body) < n:
        raise FormatError(f"PGM raster truncated: {len(body)} of {n} bytes")
    data = np.frombuffer(body[:n], dtype=dt)
    return data.reshape(h, w).astype(np.float64) / maxval


def save_pgm(path: PathLike, img: np.ndarray) -> None:
    atomic_write(path, encode_pgm(img))


def load_pgm(path: PathLike) -> np.ndarray:
    return decode_pgm(Path(path).read_bytes())


def load_image(path: PathLike) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return load_pgm(path)
    return np.asarray(load_mtt(path))


def save_image(path: PathLike, img: np.ndarray) -> None:
    if Path(path).suffix.lower() == ".pgm":
        save_pgm(path, img)
    else:
        save_mtt(path, img)


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in out:
            raise FormatError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(items: dict) -> str:
    return "".join(f"{k} = {v}\n" for k, v in items.items())
