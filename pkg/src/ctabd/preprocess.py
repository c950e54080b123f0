"""Preprocessing: isotropic resampling, Z-score normalization, patching.

Resampling maps every output voxel center into the input index space as
``i_out * (target / spacing)`` per axis (the origin is kept), samples the
image trilinearly, and clamps coordinates to the border. Masks use
nearest-neighbor with half-up rounding. Normalization uses the population
standard deviation over all voxels.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError
from .grid import LabelMask, Spacing, SubregionMask, VoxelGrid


@dataclass(frozen=True)
class PatchSpec:
    """Patch dims and stride, in voxels. Stride may not exceed the patch."""

    dims: tuple[int, int, int]
    stride: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(v) for v in self.dims)
        stride = tuple(int(v) for v in self.stride)
        if min(dims) < 1 or min(stride) < 1:
            raise ParameterError(f"patch dims and stride must be >= 1: {dims}, {stride}")
        if any(s > d for s, d in zip(stride, dims)):
            raise ParameterError(f"stride {stride} exceeds patch dims {dims}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "stride", stride)


def _out_dims(dims, spacing: Spacing, target: float) -> tuple[int, int, int]:
    # half-up rounding for test exactness
    return tuple(
        max(1, int(np.floor(n * d / target + 0.5)))
        for n, d in zip(dims, spacing.as_array())
    )


def _axis_coords(n_in: int, d: float, n_out: int, target: float) -> np.ndarray:
    c = np.arange(n_out, dtype=np.float64) * (target / d)
    return np.clip(c, 0.0, n_in - 1.0)


def resample_isotropic(grid: VoxelGrid, target_mm: float = 1.5) -> VoxelGrid:
    """Resample to cubic voxels of edge ``target_mm`` by trilinear interpolation."""
    if not target_mm > 0:
        raise ParameterError(f"target spacing must be positive, got {target_mm}")
    target = float(target_mm)
    dims = grid.dims
    out_dims = _out_dims(dims, grid.spacing, target)
    if out_dims == dims and grid.spacing.is_isotropic and grid.spacing.dx == target:
        return grid
    sp = grid.spacing.as_array()
    vals = grid.data.astype(np.float64)
    # separable interpolation, one axis at a time
    for axis in range(3):
        c = _axis_coords(dims[axis], sp[axis], out_dims[axis], target)
        i0 = np.floor(c).astype(np.intp)
        i1 = np.minimum(i0 + 1, dims[axis] - 1)
        f = c - i0
        lo = np.take(vals, i0, axis=axis)
        hi = np.take(vals, i1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = -1
        f = f.reshape(shape)
        vals = lo * (1.0 - f) + hi * f
    return VoxelGrid(vals.astype(np.float32), Spacing(target, target, target), grid.origin)


def _nearest_indices(dims, spacing: Spacing, out_dims, target: float):
    idx = []
    sp = spacing.as_array()
    for axis in range(3):
        c = _axis_coords(dims[axis], sp[axis], out_dims[axis], target)
        idx.append(np.floor(c + 0.5).astype(np.intp))  # half-up
    return idx


def resample_mask(mask: LabelMask, target_mm: float = 1.5) -> LabelMask:
    """Nearest-neighbor resampling with the same geometry rule as the image."""
    if not target_mm > 0:
        raise ParameterError(f"target spacing must be positive, got {target_mm}")
    target = float(target_mm)
    dims = mask.dims
    out_dims = _out_dims(dims, mask.spacing, target)
    if out_dims == dims and mask.spacing.is_isotropic and mask.spacing.dx == target:
        return mask
    ix, iy, iz = _nearest_indices(dims, mask.spacing, out_dims, target)
    labels = mask.labels[np.ix_(ix, iy, iz)]
    return LabelMask(labels, Spacing(target, target, target), mask.origin)


def resample_subregions(mask: SubregionMask, target_mm: float = 1.5) -> SubregionMask:
    """Nearest-neighbor resampling for subregion masks."""
    as_labels = LabelMask(mask.codes, mask.spacing, mask.origin)
    res = resample_mask(as_labels, target_mm)
    return SubregionMask(res.labels, res.spacing, res.origin)


def zscore_normalize(grid: VoxelGrid) -> VoxelGrid:
    """Subtract the mean and divide by the population std of all voxels."""
    vals = grid.data.astype(np.float64)
    mean = vals.mean()
    std = vals.std()
    if std < 1e-8:
        out = np.zeros_like(vals)
    else:
        out = (vals - mean) / std
    return VoxelGrid(out.astype(np.float32), grid.spacing, grid.origin)


def axis_corners(n: int, p: int, s: int) -> list[int]:
    """Stride-multiple corners plus a final corner flush with the far edge."""
    corners = list(range(0, n - p + 1, s))
    last = n - p
    if corners[-1] != last:
        corners.append(last)
    return corners


def pad_to_dims(grid: VoxelGrid, dims: tuple[int, int, int]) -> VoxelGrid:
    """Edge-replicate on the high side of each axis up to ``dims``."""
    pad = [(0, max(0, d - n)) for n, d in zip(grid.dims, dims)]
    if all(hi == 0 for _, hi in pad):
        return grid
    data = np.pad(grid.data, pad, mode="edge")
    return VoxelGrid(data, grid.spacing, grid.origin)


def patch_corners(dims: tuple[int, int, int], spec: PatchSpec) -> list[tuple[int, int, int]]:
    """Deterministic z-major corner list covering every voxel at least once."""
    eff = tuple(max(n, p) for n, p in zip(dims, spec.dims))
    xs = axis_corners(eff[0], spec.dims[0], spec.stride[0])
    ys = axis_corners(eff[1], spec.dims[1], spec.stride[1])
    zs = axis_corners(eff[2], spec.dims[2], spec.stride[2])
    return [(cx, cy, cz) for cz in zs for cy in ys for cx in xs]


def extract_patches(grid: VoxelGrid, spec: PatchSpec) -> list[tuple[tuple[int, int, int], VoxelGrid]]:
    """Ordered (corner, patch) pairs; small grids are edge-padded first."""
    padded = pad_to_dims(grid, spec.dims)
    px, py, pz = spec.dims
    out = []
    for cx, cy, cz in patch_corners(grid.dims, spec):
        sub = padded.data[cx : cx + px, cy : cy + py, cz : cz + pz]
        origin = (
            grid.origin[0] + cx * grid.spacing.dx,
            grid.origin[1] + cy * grid.spacing.dy,
            grid.origin[2] + cz * grid.spacing.dz,
        )
        out.append(((cx, cy, cz), VoxelGrid(sub.copy(), grid.spacing, origin)))
    return out


def assemble_patches(
    dims: tuple[int, int, int],
    spec: PatchSpec,
    patches: list[tuple[tuple[int, int, int], np.ndarray]],
) -> np.ndarray:
    """Uniform-average reassembly of (corner, values) pairs onto a volume.

    ``values`` may carry leading axes (e.g. class channels); averaging runs
    over the trailing three spatial axes. Padded regions are discarded.
    """
    if not patches:
        raise ParameterError("no patches to assemble")
    lead = patches[0][1].shape[:-3]
    eff = tuple(max(n, p) for n, p in zip(dims, spec.dims))
    acc = np.zeros(lead + eff, dtype=np.float64)
    cnt = np.zeros(eff, dtype=np.float64)
    px, py, pz = spec.dims
    for (cx, cy, cz), vals in patches:
        acc[..., cx : cx + px, cy : cy + py, cz : cz + pz] += vals
        cnt[cx : cx + px, cy : cy + py, cz : cz + pz] += 1.0
    acc /= cnt
    return acc[..., : dims[0], : dims[1], : dims[2]]
