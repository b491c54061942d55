"""Self-describing binary container for named float64 tensors.

Layout (all little-endian):

    bytes 0..7    magic ``b"DCKPT\\x01\\r\\n"``
    bytes 8..11   uint32 header length in bytes
    header        UTF-8 JSON: {"tensors": [{"name": str, "shape": [int...]}...],
                               "meta": {...}}   (sorted keys)
    payload       for each tensor, in header order: row-major float64 data

Round-trips are value-exact and, for identical inputs, byte-identical.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DCKPT\x01\r\n"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write named arrays plus a JSON-serializable ``meta`` block."""
    entries = []
    blobs = []
    for name, arr in tensors.items():
        a = np.asarray(arr, dtype=np.float64)  # keeps 0-d shape; tobytes is C-order
        entries.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"tensors": entries, "meta": meta or {}},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Read back (tensors, meta); inverse of :func:`save_checkpoint`."""
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack_from("<I", raw, len(MAGIC))
    start = len(MAGIC) + 4
    header = json.loads(raw[start : start + hlen].decode("utf-8"))
    offset = start + hlen
    tensors: dict[str, np.ndarray] = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated payload for tensor '{entry['name']}'")
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(shape)
        tensors[entry["name"]] = arr.copy()
        offset += nbytes
    if offset != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - offset} trailing bytes after payload")
    return tensors, header.get("meta", {})
