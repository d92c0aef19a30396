"""Binary PPM (P6, maxval 255) reading and writing for 3-channel images."""
from __future__ import annotations

import os

import numpy as np

from .exceptions import FormatError, ParameterError


def to_bytes(image) -> bytes:
    """Encode a ``(3, H, W)`` or ``(1, 3, H, W)`` image with values in [0, 1].

    Each value becomes ``floor(v * 255 + 0.5)`` clamped to 0..255, so 0.5 maps
    to 128.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 4:
        if img.shape[0] != 1:
            raise ParameterError(f"expected a single image, got batch of {img.shape[0]}")
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ParameterError(f"PPM needs a 3-channel image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ParameterError("image contains non-finite values")
    _, h, w = img.shape
    q = np.clip(np.floor(img * 255.0 + 0.5), 0, 255).astype(np.uint8)
    return f"P6\n{w} {h}\n255\n".encode("ascii") + q.transpose(1, 2, 0).tobytes()


def from_bytes(data: bytes) -> np.ndarray:
    """Decode P6 data into a ``(1, 3, H, W)`` float32 array in [0, 1]."""
    fields = []
    pos = 0
    while len(fields) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("malformed PPM header: unexpected end of data")
        fields.append(data[start:pos])
    if fields[0] != b"P6":
        raise FormatError(f"malformed PPM header: magic {fields[0]!r} is not P6")
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise FormatError("malformed PPM header: non-integer size") from None
    if w < 1 or h < 1 or maxval != 255:
        raise FormatError(f"malformed PPM header: size {w}x{h}, maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    body = data[pos:pos + 3 * w * h]
    if len(body) < 3 * w * h:
        raise FormatError(f"short PPM body: expected {3 * w * h} bytes, got {len(body)}")
    pixels = np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3)
    return (pixels.transpose(2, 0, 1)[None] / np.float32(255.0)).astype(np.float32)


def write_ppm(image, path) -> None:
    with open(os.fspath(path), "wb") as fh:
        fh.write(to_bytes(image))


def read_ppm(path) -> np.ndarray:
    with open(os.fspath(path), "rb") as fh:
        return from_bytes(fh.read())
