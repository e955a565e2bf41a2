"""Tensor container file shared by checkpoints, feature dumps and samples.

Layout::

    b"DDIT1"              5-byte ASCII magic
    0x01                  format version
    <u32 little-endian>   manifest length in bytes
    <manifest>            UTF-8 JSON
    <payload>             little-endian float64 data

The manifest holds ``{"tensors": [{"name", "shape", "dtype", "offset",
"len"}], ...}`` with offsets and lengths in bytes relative to the payload
start; any other top-level keys are free-form metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any

import numpy as np

MAGIC = b"DDIT1"
VERSION = 1
_HEADER = len(MAGIC) + 1 + 4


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class MalformedContainerError(ContainerError):
    pass


def encode(tensors: dict[str, np.ndarray], meta: dict[str, Any] | None = None) -> bytes:
    meta = dict(meta or {})
    if "tensors" in meta:
        raise ValueError("'tensors' is a reserved manifest key")
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "shape": list(arr.shape), "dtype": "f64",
                        "offset": offset, "len": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    manifest = json.dumps({"tensors": entries, **meta}, sort_keys=True).encode("utf-8")
    return MAGIC + bytes([VERSION]) + struct.pack("<I", len(manifest)) + manifest + b"".join(chunks)


def decode(blob: bytes) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError("bad magic: not a DDIT1 container")
    if len(blob) < _HEADER:
        raise TruncatedPayloadError("file ends inside the header")
    if blob[len(MAGIC)] != VERSION:
        raise VersionMismatchError(f"unsupported container version {blob[len(MAGIC)]}")
    (mlen,) = struct.unpack("<I", blob[len(MAGIC) + 1:_HEADER])
    if len(blob) < _HEADER + mlen:
        raise TruncatedPayloadError("file ends inside the manifest")
    try:
        manifest = json.loads(blob[_HEADER:_HEADER + mlen].decode("utf-8"))
        entries = manifest.pop("tensors")
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, AttributeError) as exc:
        raise MalformedContainerError(f"unreadable manifest: {exc}") from exc
    payload = memoryview(blob)[_HEADER + mlen:]
    tensors = {}
    for entry in entries:
        try:
            name, shape, off, size = entry["name"], tuple(entry["shape"]), entry["offset"], entry["len"]
        except (KeyError, TypeError) as exc:
            raise MalformedContainerError(f"bad tensor entry {entry!r}") from exc
        if entry.get("dtype") != "f64" or size != 8 * int(np.prod(shape, dtype=np.int64)):
            raise MalformedContainerError(f"tensor {name!r}: inconsistent dtype/shape/len")
        if off < 0 or off + size > len(payload):
            raise TruncatedPayloadError(f"tensor {name!r} extends past the end of the payload")
        arr = np.frombuffer(payload[off:off + size], dtype="<f8").reshape(shape)
        tensors[name] = arr.astype(np.float64)
    return tensors, manifest


def write(path: str | Path, tensors: dict[str, np.ndarray],
          meta: dict[str, Any] | None = None) -> None:
    Path(path).write_bytes(encode(tensors, meta))


def read(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return decode(Path(path).read_bytes())
