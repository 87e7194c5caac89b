"""Binary PPM (P6) / PGM (P5) reading and writing."""

from __future__ import annotations

import numpy as np

from .errors import DataError


def write_ppm(path, rgb):
    """Write an [H, W, 3] uint8 array as binary PPM."""
    rgb = np.ascontiguousarray(rgb, dtype=np.uint8)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise DataError("write_ppm expects an [H, W, 3] array")
    h, w, _ = rgb.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def write_pgm(path, gray):
    """Write an [H, W] uint8 array as binary PGM."""
    gray = np.ascontiguousarray(gray, dtype=np.uint8)
    if gray.ndim != 2:
        raise DataError("write_pgm expects an [H, W] array")
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def _read_header(f, magic):
    tokens = []
    while len(tokens) < 4:
        line = f.readline()
        if not line:
            raise DataError("truncated netpbm header")
        text = line.split(b"#", 1)[0]
        tokens.extend(text.split())
    if tokens[0] != magic:
        raise DataError(f"expected {magic.decode()} file, got {tokens[0]!r}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise DataError("only 8-bit netpbm files are supported")
    return w, h


def read_ppm(path):
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P6")
        buf = f.read(w * h * 3)
    if len(buf) != w * h * 3:
        raise DataError("truncated PPM payload")
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path):
    with open(path, "rb") as f:
        w, h = _read_header(f, b"P5")
        buf = f.read(w * h)
    if len(buf) != w * h:
        raise DataError("truncated PGM payload")
    return np.frombuffer(buf, dtype=np.uint8).reshape(h, w).copy()
