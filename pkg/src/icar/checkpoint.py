"""Versioned binary checkpoint container.

Layout: 4-byte magic, u32 header length (little-endian), UTF-8 JSON header,
then the tensor payload as concatenated float64 little-endian buffers in
header order. The header records a format version, a model kind, free-form
metadata, and the name/shape of every tensor, so a loader can validate the
file before touching the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from icar.errors import DataError

MAGIC = b"ICKP"
FORMAT_VERSION = 1


def save_checkpoint(path, kind: str, meta: dict, tensors: dict) -> None:
    """Write named float64 arrays plus metadata to ``path``."""
    path = Path(path)
    header = {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "tensors": [
            {"name": name, "shape": list(np.asarray(arr).shape)}
            for name, arr in tensors.items()
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(blob)), blob]
    for arr in tensors.values():
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(parts))


def load_checkpoint(path, expected_kind: str = None):
    """Read a checkpoint back as ``(meta, {name: array})``."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < 8 or raw[:4] != MAGIC:
        raise DataError(f"{path} is not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise DataError(f"truncated checkpoint header in {path}")
    try:
        header = json.loads(raw[8:8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DataError(f"corrupt checkpoint header in {path}: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise DataError(
            f"{path} has unsupported checkpoint version "
            f"{header.get('format_version')!r} (expected {FORMAT_VERSION})"
        )
    if expected_kind is not None and header.get("kind") != expected_kind:
        raise DataError(
            f"{path} holds a {header.get('kind')!r} checkpoint, "
            f"expected {expected_kind!r}"
        )
    tensors = {}
    offset = 8 + header_len
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n_bytes = int(np.prod(shape, dtype=np.int64)) * 8
        chunk = raw[offset:offset + n_bytes]
        if len(chunk) != n_bytes:
            raise DataError(
                f"truncated checkpoint payload in {path} at tensor "
                f"{entry['name']!r}"
            )
        tensors[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(shape).copy()
        offset += n_bytes
    if offset != len(raw):
        raise DataError(f"{path} has {len(raw) - offset} trailing bytes")
    return header["meta"], tensors
