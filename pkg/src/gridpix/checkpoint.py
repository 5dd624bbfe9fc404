"""Binary checkpoint format.

Layout: 8-byte magic ``GPXCKPT1``, an unsigned 64-bit little-endian header
length, the UTF-8 JSON header, then raw little-endian float32 buffers in
header order.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"GPXCKPT1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, arrays: dict, meta: dict | None = None) -> None:
    entries = []
    buffers = []
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape)})
        buffers.append(arr.tobytes(order="C"))
    header = {"version": FORMAT_VERSION, "tensors": entries, "meta": meta or {}}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for buf in buffers:
            fh.write(buf)


def load_checkpoint(path) -> tuple[dict, dict]:
    """Return ``(arrays, meta)``."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:8]!r}, expected {MAGIC!r}")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header length")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {header.get('version')}")
    offset = 16 + hlen
    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        nbytes = 4 * count
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated data for {entry['name']} at byte {offset}")
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=offset)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float32)
        offset += nbytes
    return arrays, header.get("meta", {})
