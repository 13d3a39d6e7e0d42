"""Binary PPM (P6) / PGM (P5) reading and writing."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_pnm(path, pixels: np.ndarray) -> None:
    """Write uint8 pixels: (H, W) as P5, (H, W, 3) as P6."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8:
        raise TypeError("write_pnm expects uint8 pixels")
    if pixels.ndim == 2:
        magic = b"P5"
    elif pixels.ndim == 3 and pixels.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"unsupported pixel array shape {pixels.shape}")
    h, w = pixels.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + np.ascontiguousarray(pixels).tobytes())


def _tokens(buf: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        out.append(buf[start:pos])
    return out, pos + 1  # exactly one whitespace byte precedes the raster


def read_pnm(path) -> np.ndarray:
    """Read a P5/P6 file into uint8 (H, W) or (H, W, 3)."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(buf, 4, 0)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported")
    ch = 3 if magic == b"P6" else 1
    need = w * h * ch
    raster = buf[pos:pos + need]
    if len(raster) != need:
        raise ValueError(f"{path}: truncated raster")
    arr = np.frombuffer(raster, dtype=np.uint8).reshape((h, w, 3) if ch == 3 else (h, w))
    return arr.copy()


def read_image(path) -> np.ndarray:
    """P6 image scaled to floats in [0, 1], shape (H, W, 3)."""
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise ValueError(f"{path}: expected a colour (P6) image")
    return arr.astype(np.float64) / 255.0
