"""Checkpoint container: one JSON header line plus a raw f32 payload.

Layout: the first line of the file is compact JSON (UTF-8, no inner
newlines) listing entry names and shapes in payload order plus free-form
metadata; the rest is the little-endian float32 payload, entries
concatenated in declared order. Writing is deterministic byte for byte.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..errors import FormatError

_MAGIC = "ctabd-checkpoint-1"


def save_checkpoint(path, entries, meta: dict) -> Path:
    """Write named arrays plus metadata; returns the path."""
    path = Path(path)
    names = [name for name, _ in entries]
    if len(set(names)) != len(names):
        raise FormatError("duplicate entry names in checkpoint")
    header = {
        "format": _MAGIC,
        "entries": [{"name": name, "shape": list(np.asarray(a).shape)} for name, a in entries],
        "meta": meta,
    }
    blob = bytearray(json.dumps(header, sort_keys=True).encode("utf-8"))
    blob += b"\n"
    for _, a in entries:
        blob += np.ascontiguousarray(a, dtype="<f4").tobytes()
    path.write_bytes(bytes(blob))
    return path


def load_checkpoint(path):
    """Read a checkpoint; returns (dict name -> float32 array, meta dict)."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header line")
    try:
        header = json.loads(data[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: invalid checkpoint header: {exc}") from exc
    if header.get("format") != _MAGIC:
        raise FormatError(f"{path}: unknown checkpoint format {header.get('format')!r}")
    payload = data[nl + 1 :]
    total = sum(int(np.prod(e["shape"])) for e in header["entries"])
    if len(payload) != 4 * total:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header requires {4 * total}"
        )
    arrays = {}
    offset = 0
    flat = np.frombuffer(payload, dtype="<f4")
    for e in header["entries"]:
        n = int(np.prod(e["shape"]))
        arrays[e["name"]] = flat[offset : offset + n].reshape(e["shape"]).copy()
        offset += n
    return arrays, header.get("meta", {})
