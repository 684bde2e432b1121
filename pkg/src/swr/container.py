"""Named-tensor binary container shared by checkpoints, delta records and dataset dumps.

Layout::

    8 bytes   magic (e.g. b"SWRCKPT1")
    8 bytes   manifest length n, unsigned little-endian
    n bytes   UTF-8 JSON manifest; manifest["tensors"] lists {name, shape} in file order
    ...       each tensor as little-endian float32, row-major, in manifest order
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

CKPT_MAGIC = b"SWRCKPT1"
DELTA_MAGIC = b"SWRDELT1"
DATA_MAGIC = b"SWRDATA1"

_LE_F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def atomic_write(path, payload: bytes | str):
    """Write to a sibling temp file and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = payload.encode() if isinstance(payload, str) else payload
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode(magic: bytes, manifest: dict, tensors: list[tuple[str, np.ndarray]]) -> bytes:
    if len(magic) != 8:
        raise ValueError("magic must be 8 bytes")
    manifest = dict(manifest)
    manifest["tensors"] = [{"name": n, "shape": list(np.shape(a))} for n, a in tensors]
    head = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [magic, struct.pack("<Q", len(head)), head]
    parts += [np.ascontiguousarray(a, dtype=_LE_F32).tobytes() for _, a in tensors]
    return b"".join(parts)


def decode(blob: bytes, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    if blob[:8] != magic:
        raise FormatError(f"bad magic {blob[:8]!r}, expected {magic!r}")
    if len(blob) < 16:
        raise FormatError("truncated header")
    (n,) = struct.unpack("<Q", blob[8:16])
    if 16 + n > len(blob):
        raise FormatError("manifest length exceeds file size")
    try:
        manifest = json.loads(blob[16:16 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"unreadable manifest: {exc}") from None
    offset = 16 + n
    tensors: dict[str, np.ndarray] = {}
    for entry in manifest.get("tensors", []):
        shape = tuple(int(s) for s in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 4 * count
        if end > len(blob):
            raise FormatError(f"tensor '{entry['name']}' truncated")
        arr = np.frombuffer(blob, dtype=_LE_F32, count=count, offset=offset)
        tensors[entry["name"]] = arr.astype(np.float32).reshape(shape)
        offset = end
    if offset != len(blob):
        raise FormatError(f"{len(blob) - offset} trailing bytes after last tensor")
    return manifest, tensors


def save(path, magic: bytes, manifest: dict, tensors: list[tuple[str, np.ndarray]]):
    atomic_write(path, encode(magic, manifest, tensors))


def load(path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return decode(Path(path).read_bytes(), magic)


def peek_magic(path) -> bytes:
    with open(path, "rb") as fh:
        return fh.read(8)
