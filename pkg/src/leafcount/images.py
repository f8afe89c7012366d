"""Image codecs: 8-bit PNG (through Pillow) and binary PPM (P6, hand-rolled).

Decoded images are float32 (3,H,W) arrays in [0,1]; masks are uint8 (H,W)
arrays where any non-zero pixel becomes 1.
"""
from __future__ import annotations

import io
import os
import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataError

_PPM_HEADER = re.compile(rb"P6(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)(?:\s|#[^\n]*\n)+(\d+)\s")


def _read_bytes(source) -> tuple[bytes, str]:
    if isinstance(source, (bytes, bytearray)):
        return bytes(source), "<bytes>"
    try:
        return Path(source).read_bytes(), str(source)
    except OSError as e:
        raise DataError(f"cannot read image {source}: {e}") from e


def _decode_ppm(data: bytes, name: str) -> np.ndarray:
    m = _PPM_HEADER.match(data)
    if not m:
        raise DataError(f"{name}: malformed PPM header")
    w, h, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise DataError(f"{name}: unsupported PPM max value {maxval} (only 8-bit)")
    body = data[m.end():m.end() + 3 * w * h]
    if len(body) != 3 * w * h:
        raise DataError(f"{name}: truncated PPM pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)


def _decode_raw(source) -> np.ndarray:
    """(H,W,3) uint8 pixels."""
    data, name = _read_bytes(source)
    if data[:2] == b"P6":
        return _decode_ppm(data, name)
    try:
        im = Image.open(io.BytesIO(data))
        im.load()
    except Exception as e:  # Pillow raises a zoo of types
        raise DataError(f"cannot decode image {name}: {e}") from e
    if im.mode in ("RGB", "RGBA"):
        return np.asarray(im)[..., :3]
    if im.mode in ("L", "P", "1"):
        a = np.asarray(im.convert("L") if im.mode == "1" else im)
        return np.repeat(a[..., None], 3, axis=-1)
    raise DataError(f"{name}: unsupported image mode {im.mode!r} (need 8-bit RGB/RGBA/L/P)")


def decode_image(source) -> np.ndarray:
    return (_decode_raw(source).transpose(2, 0, 1).astype(np.float32) / 255.0)


def decode_mask(source) -> np.ndarray:
    return (_decode_raw(source).any(axis=-1)).astype(np.uint8)


def _to_bytes(image: np.ndarray) -> np.ndarray:
    a = np.asarray(image)
    if a.ndim == 2:
        a = np.repeat(a[None], 3, axis=0)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ValueError(f"expected (3,H,W) or (H,W) array, got {a.shape}")
    return np.round(np.clip(a, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)


def encode_image(image: np.ndarray, fmt: str = "png") -> bytes:
    """Encode a (3,H,W) or (H,W) array in [0,1]."""
    px = _to_bytes(image)
    if fmt == "ppm":
        h, w = px.shape[:2]
        return b"P6\n%d %d\n255\n" % (w, h) + px.tobytes()
    if fmt == "png":
        buf = io.BytesIO()
        Image.fromarray(np.ascontiguousarray(px), "RGB").save(buf, format="PNG", compress_level=6)
        return buf.getvalue()
    raise ValueError(f"unsupported format {fmt!r}")


def encode_mask(mask: np.ndarray, fmt: str = "png") -> bytes:
    return encode_image((np.asarray(mask) > 0).astype(np.float32), fmt)


def write_bytes_atomic(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
