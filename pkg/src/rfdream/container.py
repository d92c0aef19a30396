"""Binary container shared by model files and dataset caches.

Layout::

    b"RFSC"  version byte 0x01
    header length  (8 bytes, little-endian unsigned)
    header         (UTF-8 JSON, includes a tensor manifest)
    blobs          (raw little-endian float32, in manifest order)

Manifest offsets are relative to the first blob byte.
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .exceptions import FormatError

MAGIC = b"RFSC"
VERSION = 1
_PREFIX = len(MAGIC) + 1 + 8


def dumps(header: dict, tensors: dict[str, np.ndarray]) -> bytes:
    manifest = []
    blobs = []
    offset = 0
    for name, arr in tensors.items():
        blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        manifest.append(
            {"name": name, "shape": list(np.shape(arr)), "offset": offset, "length": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    meta = dict(header, tensors=manifest)
    text = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return b"".join([MAGIC, bytes([VERSION]), struct.pack("<Q", len(text)), text, *blobs])


def loads(data: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if len(data) < _PREFIX or data[:4] != MAGIC:
        raise FormatError("bad magic: not an RFSC container")
    if data[4] != VERSION:
        raise FormatError(f"unsupported container version {data[4]} (expected {VERSION})")
    (hlen,) = struct.unpack("<Q", data[5:13])
    if _PREFIX + hlen > len(data):
        raise FormatError("length mismatch: header runs past end of file")
    try:
        meta = json.loads(data[_PREFIX:_PREFIX + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt header: {exc}") from None
    body = data[_PREFIX + hlen:]
    manifest = meta.pop("tensors", None)
    if not isinstance(manifest, list):
        raise FormatError("header has no tensor manifest")
    expected = sum(int(entry["length"]) for entry in manifest)
    if expected != len(body):
        raise FormatError(
            f"length mismatch: manifest declares {expected} blob bytes, file has {len(body)}"
        )
    tensors = {}
    for entry in manifest:
        start, length = int(entry["offset"]), int(entry["length"])
        shape = tuple(entry["shape"])
        if length != 4 * int(np.prod(shape, dtype=np.int64)) or start + length > len(body):
            raise FormatError(f"length mismatch for tensor {entry['name']!r}")
        arr = np.frombuffer(body, dtype="<f4", count=length // 4, offset=start)
        tensors[entry["name"]] = arr.astype(np.float32).reshape(shape)
    return meta, tensors


def write(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    data = dumps(header, tensors)
    with open(os.fspath(path), "wb") as fh:
        fh.write(data)


def read(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(os.fspath(path), "rb") as fh:
        return loads(fh.read())
