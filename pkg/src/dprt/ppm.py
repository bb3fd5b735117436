"""Binary PPM (P6) reading and writing; the bit-exact golden image format."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DecodeError


def encode_ppm(image: np.ndarray) -> bytes:
    """Encode an (H, W, 3) uint8 array as P6 with maxval 255."""
    if image.ndim != 3 or image.shape[2] != 3 or image.dtype != np.uint8:
        raise ValueError(f"expected (H, W, 3) uint8 image, got {image.shape} {image.dtype}")
    h, w = image.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + image.tobytes()


def decode_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if len(parts) != 4 or parts[0] != b"P6" or parts[2] != b"255":
        raise DecodeError("not a P6 maxval-255 PPM")
    try:
        w, h = (int(v) for v in parts[1].split())
    except ValueError as exc:
        raise DecodeError(f"bad PPM dimensions: {parts[1]!r}") from exc
    raw = parts[3]
    if len(raw) != w * h * 3:
        raise DecodeError(f"PPM pixel data length {len(raw)}, expected {w * h * 3}")
    return np.frombuffer(raw, np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())
