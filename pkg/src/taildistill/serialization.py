"""Versioned binary containers for checkpoints and other run artifacts.

Container layout (all integers little-endian):

    magic (8 bytes) | version (u32) | header_len (u64) | header JSON | payload

The header JSON carries run metadata plus an ordered array table
(name, shape, dtype); payload is the raw array bytes concatenated in
table order.  Arrays are stored as little-endian float32 unless the
table says otherwise.  The byte stream is fully determined by its
inputs, so identical state always hashes identically.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"TLDCONT\x00"
VERSION = 1

_ALLOWED_DTYPES = {"<f4", "<f8", "<i8"}


class ContainerError(ValueError):
    """Raised for malformed or unsupported container files."""


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_container(path, arrays: dict, meta: dict) -> None:
    """Write named arrays plus metadata to ``path``.

    ``arrays`` maps name -> numpy array; float arrays are stored as
    little-endian float32, integer arrays as little-endian int64.
    """
    path = Path(path)
    table = []
    blobs = []
    for name in arrays:
        arr = np.asarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f4")
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8")
        else:
            raise ContainerError(f"unsupported dtype {arr.dtype} for array {name!r}")
        arr = np.ascontiguousarray(arr)
        table.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str})
        blobs.append(arr.tobytes())
    header = _canonical_json({"meta": meta, "arrays": table})
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_container(path):
    """Read a container back as ``(arrays, meta)``."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise ContainerError(f"{path}: not a taildistill container")
    (version,) = struct.unpack_from("<I", raw, 8)
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version}")
    (header_len,) = struct.unpack_from("<Q", raw, 12)
    header_end = 20 + header_len
    header = json.loads(raw[20:header_end].decode("utf-8"))
    arrays = {}
    offset = header_end
    for entry in header["arrays"]:
        dtype = entry["dtype"]
        if dtype not in _ALLOWED_DTYPES:
            raise ContainerError(f"{path}: unsupported dtype {dtype}")
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        chunk = raw[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ContainerError(f"{path}: truncated payload for {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(chunk, dtype=dtype).reshape(shape).copy()
        offset += nbytes
    if offset != len(raw):
        raise ContainerError(f"{path}: trailing bytes after payload")
    return arrays, header["meta"]


def file_hash(path) -> str:
    """sha256 hex digest of a file's bytes."""
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(obj) -> str:
    """sha256 hex digest of a JSON-serializable config object."""
    return hashlib.sha256(_canonical_json(obj)).hexdigest()
