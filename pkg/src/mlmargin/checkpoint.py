"""Single-file checkpoint container: magic, JSON header, float64 blob.

Layout: 8 magic bytes, a little-endian u64 header length, the UTF-8 JSON
header, then all arrays concatenated as raw float64.  The header records
each array's name, shape, and byte offset plus a checksum of the whole blob,
so truncation and corruption are detected before anything is deserialized.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

__all__ = ["CheckpointError", "save_checkpoint", "load_checkpoint", "MAGIC"]

MAGIC = b"MLMCKPT1"


class CheckpointError(ValueError):
    """A checkpoint file is missing, malformed, or corrupt."""


def save_checkpoint(path, arrays: dict, meta: dict) -> None:
    """Write named float64 arrays plus a JSON-serializable metadata dict."""
    entries = []
    chunks = []
    offset = 0
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        raw = arr.tobytes()
        entries.append({"name": str(name), "shape": list(arr.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    header = {
        "arrays": entries,
        "meta": meta,
        "blob_sha256": hashlib.sha256(blob).hexdigest(),
        "blob_bytes": len(blob),
    }
    header_bytes = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header_bytes)))
        fh.write(header_bytes)
        fh.write(blob)


def load_checkpoint(path) -> tuple:
    """Read back (arrays dict, meta dict); validates magic, header, checksum."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if len(raw) < len(MAGIC) + 8:
        raise CheckpointError("checkpoint truncated before header")
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError("bad checkpoint magic; not a checkpoint file")
    (header_len,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    header_start = len(MAGIC) + 8
    if len(raw) < header_start + header_len:
        raise CheckpointError("checkpoint truncated inside header")
    try:
        header = json.loads(raw[header_start : header_start + header_len].decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise CheckpointError(f"checkpoint header is not valid JSON: {e}") from e
    blob = raw[header_start + header_len :]
    try:
        declared = int(header["blob_bytes"])
        checksum = header["blob_sha256"]
        entries = header["arrays"]
        meta = header["meta"]
    except (KeyError, TypeError, ValueError) as e:
        raise CheckpointError(f"checkpoint header missing field: {e}") from e
    if len(blob) != declared:
        raise CheckpointError(f"checkpoint blob is {len(blob)} bytes, header declares {declared}")
    if hashlib.sha256(blob).hexdigest() != checksum:
        raise CheckpointError("checkpoint blob checksum mismatch; file corrupt")
    arrays = {}
    for entry in entries:
        shape = tuple(int(v) for v in entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = int(entry["offset"])
        end = start + count * 8
        if end > len(blob):
            raise CheckpointError(f"array {entry['name']!r} extends past blob end")
        arrays[entry["name"]] = np.frombuffer(blob[start:end], dtype=np.float64).reshape(shape).copy()
    return arrays, meta
