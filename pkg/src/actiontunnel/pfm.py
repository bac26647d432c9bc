"""Minimal PFM (portable float map) encode/decode.

Single-channel, 32-bit float, little-endian (negative scale header). Used for
depth maps and height-map grids.
"""

from __future__ import annotations

import io

import numpy as np


def pfm_encode(data: np.ndarray) -> bytes:
    """Encode a 2D float array as single-channel little-endian PFM bytes."""
    a = np.asarray(data, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError(f"PFM encoder expects a 2D array, got shape {a.shape}")
    h, w = a.shape
    buf = io.BytesIO()
    buf.write(b"Pf\n")
    buf.write(f"{w} {h}\n".encode("ascii"))
    buf.write(b"-1.0\n")
    # PFM stores rows bottom-to-top.
    buf.write(np.flipud(a).tobytes())
    return buf.getvalue()


def pfm_decode(blob: bytes) -> np.ndarray:
    """Decode single-channel PFM bytes to a float32 2D array."""
    buf = io.BytesIO(blob)

    def token():
        chars = []
        while True:
            c = buf.read(1)
            if not c:
                raise ValueError("truncated PFM header")
            if c.isspace():
                if chars:
                    return b"".join(chars)
                continue
            chars.append(c)

    magic = token()
    if magic != b"Pf":
        raise ValueError(f"not a single-channel PFM (magic {magic!r})")
    w = int(token())
    h = int(token())
    scale = float(token())
    count = w * h
    dtype = "<f4" if scale < 0 else ">f4"
    raw = buf.read(count * 4)
    if len(raw) != count * 4:
        raise ValueError("truncated PFM payload")
    a = np.frombuffer(raw, dtype=dtype).reshape(h, w)
    return np.flipud(a).astype(np.float32)


def write_pfm(path, data: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(pfm_encode(data))


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        return pfm_decode(f.read())
