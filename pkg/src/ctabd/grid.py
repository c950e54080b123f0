"""Voxel-grid data model and elementary grid geometry.

Conventions used everywhere in this package:

* Axes follow LPS: +x patient-left, +y patient-posterior, +z patient-superior.
  The anteroposterior direction is therefore the y axis.
* Arrays have shape (nx, ny, nz) and the canonical linear index of voxel
  (x, y, z) is ``x + nx * (y + ny * z)``, i.e. x varies fastest.
* ``origin`` is the world position (mm) of the center of voxel (0, 0, 0).
* Boxes are half-open: the min corner is inclusive, the max corner exclusive.

All types freeze their payload arrays after construction; operations are pure
functions, so values can be shared freely between threads.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum
from typing import Optional

import numpy as np

from .errors import GridBoundsError, MaskValidationError, ParameterError, ShapeError

BACKGROUND = 0


class OrganId(IntEnum):
    """Organ label codes; the value doubles as the stored mask byte."""

    LIVER = 1
    RIGHT_KIDNEY = 2
    LEFT_KIDNEY = 3
    SPLEEN = 4
    PROSTATE = 5


class SubregionId(IntEnum):
    """Subregion codes stored in a SubregionMask."""

    LIVER_RIGHT_LOBE = 1
    LIVER_LEFT_LOBE = 2
    RIGHT_KIDNEY_CORTEX = 3
    LEFT_KIDNEY_CORTEX = 4


#: Organ that owns each subregion code.
SUBREGION_ORGAN = {
    SubregionId.LIVER_RIGHT_LOBE: OrganId.LIVER,
    SubregionId.LIVER_LEFT_LOBE: OrganId.LIVER,
    SubregionId.RIGHT_KIDNEY_CORTEX: OrganId.RIGHT_KIDNEY,
    SubregionId.LEFT_KIDNEY_CORTEX: OrganId.LEFT_KIDNEY,
}

MAX_LABEL = max(OrganId)
MAX_SUBREGION = max(SubregionId)


@dataclass(frozen=True)
class Spacing:
    """Voxel edge lengths in millimeters along x, y, z."""

    dx: float
    dy: float
    dz: float

    def __post_init__(self):
        if not (self.dx > 0 and self.dy > 0 and self.dz > 0):
            raise ParameterError(f"spacing must be positive, got {self}")

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz], dtype=np.float64)

    @property
    def is_isotropic(self) -> bool:
        return self.dx == self.dy == self.dz


def _freeze(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Scalar float32 volume with geometry metadata."""

    data: np.ndarray
    spacing: Spacing
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        a = np.asarray(self.data, dtype=np.float32)
        if a.ndim != 3 or min(a.shape) < 1:
            raise ShapeError(f"volume data must be 3-D, got shape {a.shape}")
        object.__setattr__(self, "data", _freeze(a.copy(order="C")))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape


def _check_labels(a: np.ndarray, max_code: int, what: str) -> np.ndarray:
    arr = np.asarray(a)
    if arr.ndim != 3 or min(arr.shape) < 1:
        raise ShapeError(f"{what} data must be 3-D, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if not np.issubdtype(arr.dtype, np.integer) or arr.min(initial=0) < 0:
            raise MaskValidationError(f"{what} labels must be non-negative integers")
        arr = arr.astype(np.uint8, casting="unsafe") if arr.max(initial=0) <= 255 else arr
    if arr.max(initial=0) > max_code:
        raise MaskValidationError(
            f"{what} contains code {int(arr.max())}, maximum allowed is {max_code}"
        )
    return arr.astype(np.uint8, copy=True, order="C")


@dataclass(frozen=True, eq=False)
class LabelMask:
    """Organ label volume; shares geometry conventions with VoxelGrid."""

    labels: np.ndarray
    spacing: Spacing
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "labels", _freeze(_check_labels(self.labels, MAX_LABEL, "mask")))
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.labels.shape


@dataclass(frozen=True, eq=False)
class SubregionMask:
    """Subregion label volume (liver lobes, kidney cortices)."""

    codes: np.ndarray
    spacing: Spacing
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(
            self, "codes", _freeze(_check_labels(self.codes, MAX_SUBREGION, "subregion mask"))
        )
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.codes.shape


@dataclass(frozen=True)
class Box3D:
    """Axis-aligned voxel-index box, min corner inclusive, max corner exclusive."""

    lo: tuple[int, int, int]
    hi: tuple[int, int, int]

    def __post_init__(self):
        lo = tuple(int(v) for v in self.lo)
        hi = tuple(int(v) for v in self.hi)
        if any(l >= h for l, h in zip(lo, hi)):
            raise ParameterError(f"box min corner must be < max corner per axis: {lo} vs {hi}")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def extents(self) -> tuple[int, int, int]:
        return tuple(h - l for l, h in zip(self.lo, self.hi))

    @property
    def volume(self) -> int:
        ex, ey, ez = self.extents
        return ex * ey * ez

    @property
    def center(self) -> tuple[float, float, float]:
        return tuple((l + h) / 2.0 for l, h in zip(self.lo, self.hi))

    def shift(self, offset: tuple[int, int, int]) -> "Box3D":
        return Box3D(
            tuple(l + o for l, o in zip(self.lo, offset)),
            tuple(h + o for h, o in zip(self.hi, offset)),
        )

    def within(self, dims: tuple[int, int, int]) -> bool:
        return all(l >= 0 for l in self.lo) and all(h <= d for h, d in zip(self.hi, dims))


def same_geometry(a, b, atol: float = 1e-9) -> bool:
    """True when two grid-like objects share dims, spacing, and origin."""
    return (
        a.dims == b.dims
        and np.allclose(a.spacing.as_array(), b.spacing.as_array(), atol=atol)
        and np.allclose(a.origin, b.origin, atol=atol)
    )


def linear_index(x: int, y: int, z: int, dims: tuple[int, int, int]) -> int:
    """Canonical x-fastest linear index."""
    nx, ny, _ = dims
    return x + nx * (y + ny * z)


def unravel_index(idx: int, dims: tuple[int, int, int]) -> tuple[int, int, int]:
    """Inverse of :func:`linear_index`."""
    nx, ny, _ = dims
    x = idx % nx
    y = (idx // nx) % ny
    z = idx // (nx * ny)
    return x, y, z


def voxel_volume_mm3(spacing: Spacing) -> float:
    """Volume of one voxel in cubic millimeters."""
    return spacing.dx * spacing.dy * spacing.dz


def bounding_box_of(mask: LabelMask, organ: OrganId) -> Optional[Box3D]:
    """Tightest box containing every voxel of the organ, or None if absent."""
    xs, ys, zs = np.nonzero(mask.labels == int(organ))
    if xs.size == 0:
        return None
    return Box3D(
        (int(xs.min()), int(ys.min()), int(zs.min())),
        (int(xs.max()) + 1, int(ys.max()) + 1, int(zs.max()) + 1),
    )


def _crop_array(a: np.ndarray, box: Box3D) -> np.ndarray:
    if not box.within(a.shape):
        raise GridBoundsError(f"box {box.lo}..{box.hi} exceeds grid dims {a.shape}")
    (x0, y0, z0), (x1, y1, z1) = box.lo, box.hi
    return a[x0:x1, y0:y1, z0:z1].copy()


def _shifted_origin(origin, spacing: Spacing, lo) -> tuple[float, float, float]:
    return (
        origin[0] + lo[0] * spacing.dx,
        origin[1] + lo[1] * spacing.dy,
        origin[2] + lo[2] * spacing.dz,
    )


def crop(grid: VoxelGrid, box: Box3D) -> VoxelGrid:
    """Copy the sub-volume covered by ``box``; origin follows the min corner."""
    return VoxelGrid(
        _crop_array(grid.data, box), grid.spacing, _shifted_origin(grid.origin, grid.spacing, box.lo)
    )


def crop_mask(mask: LabelMask, box: Box3D) -> LabelMask:
    """Mask counterpart of :func:`crop`."""
    return LabelMask(
        _crop_array(mask.labels, box),
        mask.spacing,
        _shifted_origin(mask.origin, mask.spacing, box.lo),
    )
