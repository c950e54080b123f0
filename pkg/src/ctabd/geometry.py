"""Model-free measurement of organ masks.

This is the reference measurement path: every quantity is computed directly
from voxel geometry, independent of the learned measurement network.

Definitions:

* volume: labeled-voxel count times voxel volume.
* length: extent of voxel centers along the first principal axis plus the
  projection of one voxel box onto that axis (caliper correction).
* AP diameter: voxel-center extent along +y plus one y spacing.
* surface area: exposed-face counting (the volume boundary counts as
  exposed). Face counting inflates a smooth surface by a known factor of
  about 1.5 versus the continuum area; see ``FACE_COUNT_INFLATION``.
* cortical thickness: twice the mean distance-transform value over cortex
  voxels that are local maxima of the distance along at least one axis.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ShapeError
from .grid import (
    LabelMask,
    OrganId,
    Spacing,
    SubregionId,
    SubregionMask,
    voxel_volume_mm3,
)

#: Empirical ratio of face-counted area to continuum area for smooth shapes.
FACE_COUNT_INFLATION = 1.5


@dataclass(frozen=True)
class GeoMeasurements:
    """Geometric measurement slots; quantities that do not apply stay None."""

    volume_cc: Optional[float] = None
    length_mm: Optional[float] = None
    ap_diameter_mm: Optional[float] = None
    z_extent_mm: Optional[float] = None
    surface_area_cm2: Optional[float] = None
    cortical_thickness_mm: Optional[float] = None
    lobe_volumes_cc: Optional[tuple[Optional[float], Optional[float]]] = None
    provenance: str = "geometric"

    def to_dict(self) -> dict:
        return {
            "volume_cc": self.volume_cc,
            "length_mm": self.length_mm,
            "ap_diameter_mm": self.ap_diameter_mm,
            "z_extent_mm": self.z_extent_mm,
            "surface_area_cm2": self.surface_area_cm2,
            "cortical_thickness_mm": self.cortical_thickness_mm,
            "lobe_volumes_cc": None if self.lobe_volumes_cc is None else list(self.lobe_volumes_cc),
            "provenance": self.provenance,
        }


def organ_volume_cc(mask: LabelMask, organ: OrganId, spacing: Spacing | None = None) -> Optional[float]:
    spacing = spacing or mask.spacing
    n = int((mask.labels == int(organ)).sum())
    if n == 0:
        return None
    return n * voxel_volume_mm3(spacing) / 1000.0


def _principal_axis(pts_mm: np.ndarray) -> np.ndarray:
    centered = pts_mm - pts_mm.mean(axis=0)
    cov = centered.T @ centered / len(pts_mm)
    evals, evecs = np.linalg.eigh(cov)
    top = evals[-1]
    # near-ties: prefer the axis closest to +z, then +y
    tied = [k for k in range(3) if evals[k] >= top - 1e-9 * max(top, 1.0)]
    best = max(tied, key=lambda k: (abs(evecs[2, k]), abs(evecs[1, k])))
    u = evecs[:, best]
    if u[2] < 0 or (u[2] == 0 and (u[1] < 0 or (u[1] == 0 and u[0] < 0))):
        u = -u
    return u


def organ_length_mm(mask: LabelMask, organ: OrganId, spacing: Spacing | None = None) -> Optional[float]:
    """Caliper extent along the first principal axis of the voxel centers."""
    spacing = spacing or mask.spacing
    idx = np.argwhere(mask.labels == int(organ))
    if len(idx) < 2:
        return None
    pts = idx.astype(np.float64) * spacing.as_array()
    u = _principal_axis(pts)
    proj = pts @ u
    correction = float(np.abs(u) @ spacing.as_array())
    return float(proj.max() - proj.min()) + correction


def ap_diameter_mm(mask: LabelMask, organ: OrganId, spacing: Spacing | None = None) -> Optional[float]:
    """Extent along the anteroposterior (+y) axis."""
    spacing = spacing or mask.spacing
    ys = np.nonzero(mask.labels == int(organ))[1]
    if ys.size == 0:
        return None
    return (float(ys.max() - ys.min())) * spacing.dy + spacing.dy


def z_extent_mm(mask: LabelMask, organ: OrganId, spacing: Spacing | None = None) -> Optional[float]:
    """Craniocaudal extent, reported alongside the principal-axis length."""
    spacing = spacing or mask.spacing
    zs = np.nonzero(mask.labels == int(organ))[2]
    if zs.size == 0:
        return None
    return (float(zs.max() - zs.min())) * spacing.dz + spacing.dz


def surface_area_cm2(mask: LabelMask, organ: OrganId, spacing: Spacing | None = None) -> Optional[float]:
    """Exposed-face area; the grid boundary counts as exposed."""
    spacing = spacing or mask.spacing
    region = mask.labels == int(organ)
    if not region.any():
        return None
    d = spacing.as_array()
    face_area = (d[1] * d[2], d[0] * d[2], d[0] * d[1])
    total = 0.0
    for axis in range(3):
        r = np.moveaxis(region, axis, 0)
        transitions = int(np.count_nonzero(r[:-1] != r[1:]))
        border = int(r[0].sum()) + int(r[-1].sum())
        total += (transitions + border) * face_area[axis]
    return total / 100.0


def euclidean_distance_transform(region: np.ndarray, spacing: Spacing) -> np.ndarray:
    """Distance (mm) from each foreground voxel center to the nearest
    background voxel center; zero on background. Exact and anisotropy-aware."""
    region = np.asarray(region, dtype=bool)
    if region.ndim != 3:
        raise ShapeError(f"region must be 3-D, got shape {region.shape}")
    return ndimage.distance_transform_edt(
        region, sampling=(spacing.dx, spacing.dy, spacing.dz)
    ).astype(np.float64)


def _axis_local_maxima(dist: np.ndarray) -> np.ndarray:
    """Voxels whose distance is >= both neighbors along at least one axis."""
    sel = np.zeros(dist.shape, dtype=bool)
    for axis in range(3):
        d = np.moveaxis(dist, axis, 0)
        ge_prev = np.ones(d.shape, dtype=bool)
        ge_next = np.ones(d.shape, dtype=bool)
        ge_prev[1:] = d[1:] >= d[:-1]
        ge_next[:-1] = d[:-1] >= d[1:]
        sel |= np.moveaxis(ge_prev & ge_next, 0, axis)
    return sel


_CORTEX_CODE = {
    OrganId.RIGHT_KIDNEY: SubregionId.RIGHT_KIDNEY_CORTEX,
    OrganId.LEFT_KIDNEY: SubregionId.LEFT_KIDNEY_CORTEX,
}


def cortical_thickness_mm(
    mask: LabelMask,
    subregions: SubregionMask | None,
    kidney: OrganId,
    spacing: Spacing | None = None,
) -> Optional[float]:
    """Medial-axis thickness estimate of the kidney cortex shell."""
    if subregions is None or kidney not in _CORTEX_CODE:
        return None
    spacing = spacing or mask.spacing
    cortex = (subregions.codes == int(_CORTEX_CODE[kidney])) & (mask.labels == int(kidney))
    if not cortex.any():
        return None
    dist = euclidean_distance_transform(cortex, spacing)
    medial = _axis_local_maxima(dist) & cortex
    return 2.0 * float(dist[medial].mean())


def lobe_volumes_cc(
    mask: LabelMask, subregions: SubregionMask | None, spacing: Spacing | None = None
) -> Optional[tuple[Optional[float], Optional[float]]]:
    """(right lobe cc, left lobe cc); lobes are intersected with the liver."""
    if subregions is None:
        return None
    spacing = spacing or mask.spacing
    liver = mask.labels == int(OrganId.LIVER)
    if not liver.any():
        return None
    vox = voxel_volume_mm3(spacing) / 1000.0
    out = []
    for code in (SubregionId.LIVER_RIGHT_LOBE, SubregionId.LIVER_LEFT_LOBE):
        n = int(((subregions.codes == int(code)) & liver).sum())
        out.append(n * vox if n else None)
    return tuple(out)


def measure_organ(
    mask: LabelMask,
    organ: OrganId,
    subregions: SubregionMask | None = None,
    spacing: Spacing | None = None,
) -> GeoMeasurements:
    """All geometric quantities that apply to one organ."""
    spacing = spacing or mask.spacing
    vol = organ_volume_cc(mask, organ, spacing)
    if vol is None:
        return GeoMeasurements()
    m = GeoMeasurements(
        volume_cc=vol,
        length_mm=organ_length_mm(mask, organ, spacing),
        ap_diameter_mm=ap_diameter_mm(mask, organ, spacing),
        z_extent_mm=z_extent_mm(mask, organ, spacing),
        surface_area_cm2=surface_area_cm2(mask, organ, spacing) if organ is OrganId.SPLEEN else None,
        cortical_thickness_mm=cortical_thickness_mm(mask, subregions, organ, spacing),
        lobe_volumes_cc=lobe_volumes_cc(mask, subregions, spacing) if organ is OrganId.LIVER else None,
    )
    return m
