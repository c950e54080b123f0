"""Connected-component analysis and small-component removal.

Components are computed per organ label independently. Component ids are
dense 1..K, assigned in order of each component's minimum canonical linear
index (x-fastest), which also fixes every tie-break deterministically.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .grid import BACKGROUND, Box3D, LabelMask, OrganId

DEFAULT_MIN_VOXELS = 100


@dataclass(frozen=True)
class Component:
    id: int
    organ: OrganId
    voxel_count: int
    box: Box3D
    min_linear_index: int


@dataclass(frozen=True, eq=False)
class ComponentSet:
    """Per-voxel component ids (0 = background) plus per-component stats."""

    component_ids: np.ndarray  # int32, same shape as the mask
    components: tuple[Component, ...]


def _structure(connectivity: int) -> np.ndarray:
    if connectivity == 6:
        return ndimage.generate_binary_structure(3, 1)
    if connectivity == 26:
        return ndimage.generate_binary_structure(3, 3)
    raise ParameterError(f"connectivity must be 6 or 26, got {connectivity}")


def connected_components(mask: LabelMask, connectivity: int = 26) -> ComponentSet:
    structure = _structure(connectivity)
    labels = mask.labels
    nx, ny, _ = labels.shape
    ids = np.zeros(labels.shape, dtype=np.int32)
    found = []
    for organ in OrganId:
        region = labels == int(organ)
        if not region.any():
            continue
        lab, n = ndimage.label(region, structure=structure)
        for k in range(1, n + 1):
            xs, ys, zs = np.nonzero(lab == k)
            lin = xs + nx * (ys + ny * zs)
            found.append(
                (
                    int(lin.min()),
                    organ,
                    int(xs.size),
                    Box3D(
                        (int(xs.min()), int(ys.min()), int(zs.min())),
                        (int(xs.max()) + 1, int(ys.max()) + 1, int(zs.max()) + 1),
                    ),
                    (xs, ys, zs),
                )
            )
    found.sort(key=lambda t: t[0])
    components = []
    for new_id, (min_lin, organ, count, box, (xs, ys, zs)) in enumerate(found, start=1):
        ids[xs, ys, zs] = new_id
        components.append(Component(new_id, organ, count, box, min_lin))
    return ComponentSet(ids, tuple(components))


def remove_small_components(
    mask: LabelMask, min_voxels: int = DEFAULT_MIN_VOXELS, connectivity: int = 26
) -> LabelMask:
    """Reset components with fewer than ``min_voxels`` voxels to background."""
    comps = connected_components(mask, connectivity)
    out = mask.labels.copy()
    for c in comps.components:
        if c.voxel_count < min_voxels:
            out[comps.component_ids == c.id] = BACKGROUND
    return LabelMask(out, mask.spacing, mask.origin)


def keep_largest_component(
    mask: LabelMask, organ: OrganId, connectivity: int = 26
) -> LabelMask:
    """Keep only the organ's largest component; ties keep the lowest id."""
    comps = connected_components(mask, connectivity)
    mine = [c for c in comps.components if c.organ == organ]
    if len(mine) <= 1:
        return mask
    best = max(mine, key=lambda c: (c.voxel_count, -c.id))
    out = mask.labels.copy()
    for c in mine:
        if c.id != best.id:
            out[comps.component_ids == c.id] = BACKGROUND
    return LabelMask(out, mask.spacing, mask.origin)
