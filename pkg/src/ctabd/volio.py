"""Bit-exact on-disk container for volumes and masks.

A stored volume is a pair of files sharing one path stem:

* ``<stem>.json`` — UTF-8 header: dims, spacing_mm, origin_mm, dtype, order.
* ``<stem>.raw``  — payload, little-endian, x-fastest voxel order.

dtype tags: ``f32le`` (4 bytes/voxel) for scalar volumes, ``u8`` (1 byte) for
label and subregion masks. The ``order`` tag is always ``x-fastest``.
"""
from __future__ import annotations

import json
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, MaskValidationError
from .grid import MAX_LABEL, LabelMask, Spacing, SubregionMask, VoxelGrid

_DTYPES = {"f32le": np.dtype("<f4"), "u8": np.dtype("u1")}

Volume = Union[VoxelGrid, LabelMask, SubregionMask]


def _payload(obj: Volume) -> tuple[np.ndarray, str]:
    if isinstance(obj, VoxelGrid):
        return obj.data, "f32le"
    if isinstance(obj, LabelMask):
        return obj.labels, "u8"
    if isinstance(obj, SubregionMask):
        return obj.codes, "u8"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def header_dict(obj: Volume) -> dict:
    arr, tag = _payload(obj)
    return {
        "dims": list(arr.shape),
        "spacing_mm": [obj.spacing.dx, obj.spacing.dy, obj.spacing.dz],
        "origin_mm": list(obj.origin),
        "dtype": tag,
        "order": "x-fastest",
    }


def write_volume(obj: Volume, stem: Union[str, Path]) -> tuple[Path, Path]:
    """Write ``<stem>.json`` and ``<stem>.raw``; returns the two paths."""
    stem = Path(stem)
    arr, tag = _payload(obj)
    header = header_dict(obj)
    json_path = stem.with_suffix(stem.suffix + ".json")
    raw_path = stem.with_suffix(stem.suffix + ".raw")
    json_path.write_text(json.dumps(header, sort_keys=True) + "\n", encoding="utf-8")
    # ravel in Fortran order so x varies fastest in the byte stream
    raw_path.write_bytes(np.ascontiguousarray(arr, dtype=_DTYPES[tag]).ravel(order="F").tobytes())
    return json_path, raw_path


def read_header(stem: Union[str, Path]) -> dict:
    stem = Path(stem)
    json_path = stem.with_suffix(stem.suffix + ".json")
    try:
        header = json.loads(json_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: invalid header JSON: {exc}") from exc
    for key in ("dims", "spacing_mm", "origin_mm", "dtype", "order"):
        if key not in header:
            raise FormatError(f"{json_path}: missing header key {key!r}")
    if header["order"] != "x-fastest":
        raise FormatError(f"{json_path}: unsupported order tag {header['order']!r}")
    if header["dtype"] not in _DTYPES:
        raise FormatError(f"{json_path}: unknown dtype tag {header['dtype']!r}")
    dims = header["dims"]
    if len(dims) != 3 or any((not isinstance(d, int)) or d < 1 for d in dims):
        raise FormatError(f"{json_path}: dims must be three positive integers, got {dims}")
    return header


def read_volume(stem: Union[str, Path]) -> Union[VoxelGrid, LabelMask]:
    """Inverse of :func:`write_volume`; the dtype tag picks the return type."""
    stem = Path(stem)
    header = read_header(stem)
    raw_path = stem.with_suffix(stem.suffix + ".raw")
    dims = tuple(header["dims"])
    dtype = _DTYPES[header["dtype"]]
    blob = raw_path.read_bytes()
    expected = dtype.itemsize * dims[0] * dims[1] * dims[2]
    if len(blob) != expected:
        raise FormatError(
            f"{raw_path}: payload is {len(blob)} bytes, header requires {expected}"
        )
    arr = np.frombuffer(blob, dtype=dtype).reshape(dims, order="F")
    spacing = Spacing(*header["spacing_mm"])
    origin = tuple(header["origin_mm"])
    if header["dtype"] == "u8":
        if arr.max(initial=0) > MAX_LABEL:
            raise MaskValidationError(
                f"{raw_path}: label byte {int(arr.max())} exceeds maximum {MAX_LABEL}"
            )
        return LabelMask(arr, spacing, origin)
    return VoxelGrid(arr.astype(np.float32, copy=False), spacing, origin)


def read_subregions(stem: Union[str, Path]) -> SubregionMask:
    """Read a u8 volume and validate it against the subregion code range."""
    mask = read_volume(stem)
    if not isinstance(mask, LabelMask):
        raise FormatError(f"{stem}: expected a u8 payload for a subregion mask")
    return SubregionMask(mask.labels, mask.spacing, mask.origin)
