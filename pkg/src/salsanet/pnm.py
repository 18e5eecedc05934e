"""Minimal netpbm (PGM/PPM) reading and writing."""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def _tokens(data: bytes, count: int):
    """Return the first ``count`` header tokens and the offset after them."""
    toks, i, n = [], 0, len(data)
    while len(toks) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not data[j:j + 1].isspace():
            j += 1
        if j == i:
            raise PnmError("truncated header")
        toks.append(data[i:j])
        i = j
    return toks, i


def read_pgm(data: bytes) -> np.ndarray:
    """Decode an 8-bit P5 (binary) or P2 (ascii) grayscale image to ``(H, W)`` uint8."""
    (magic, w, h, maxval), off = _tokens(data, 4)
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise PnmError("only 8-bit PGM is supported")
    if magic == b"P5":
        if len(data) < off + 1 + w * h:
            raise PnmError("truncated P5 pixel data")
        pix = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off + 1)
    elif magic == b"P2":
        pix = np.array(data[off:].split()[:w * h], dtype=np.int64).astype(np.uint8)
        if pix.size != w * h:
            raise PnmError("truncated P2 pixel data")
    else:
        raise PnmError(f"not a PGM file (magic {magic!r})")
    return pix.reshape(h, w).copy()


def write_pgm(img: np.ndarray) -> bytes:
    img = np.asarray(img, dtype=np.uint8)
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def write_ppm(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    (magic, w, h, maxval), off = _tokens(data, 4)
    if magic != b"P6" or int(maxval) > 255:
        raise PnmError("only 8-bit binary PPM is supported")
    w, h = int(w), int(h)
    if len(data) < off + 1 + w * h * 3:
        raise PnmError("truncated P6 pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off + 1).reshape(h, w, 3).copy()
