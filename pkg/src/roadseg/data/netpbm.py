"""Binary netpbm readers and writers (P5 grayscale, P6 color, maxval 255)."""

from __future__ import annotations

from pathlib import Path

import numpy as np


def _write(path, magic: bytes, arr: np.ndarray) -> None:
    h, w = arr.shape[:2]
    header = magic + f"\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + arr.astype(np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    if gray.ndim != 2:
        raise ValueError(f"PGM wants a 2-D array, got shape {gray.shape}")
    _write(path, b"P5", gray)


def write_ppm(path, rgb: np.ndarray) -> None:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM wants an HxWx3 array, got shape {rgb.shape}")
    _write(path, b"P6", rgb)


def _read_tokens(data: bytes, count: int):
    """First `count` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset one byte past the final separator,
    where the raster begins.
    """
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated netpbm header")
        tokens.append(data[start:pos])
    return tokens, pos + 1


def read_netpbm(path) -> np.ndarray:
    """Read a P5 file to [H, W] uint8 or a P6 file to [H, W, 3] uint8."""
    data = Path(path).read_bytes()
    (magic, *dims), offset = _read_tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: unsupported netpbm magic {magic!r}")
    w, h, maxval = (int(t) for t in dims)
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 is supported, got {maxval}")
    channels = 1 if magic == b"P5" else 3
    raster = np.frombuffer(data, np.uint8, count=h * w * channels, offset=offset)
    if raster.size != h * w * channels:
        raise ValueError(f"{path}: truncated raster")
    shape = (h, w) if channels == 1 else (h, w, 3)
    return raster.reshape(shape).copy()
