"""Synthetic abdomen phantoms with exact analytic ground truth.

Five ellipsoidal organs are placed at fixed anatomical stations (LPS axes:
liver right-superior, spleen left-superior, kidneys posterior-bilateral,
prostate inferior-midline). The liver is the union of two x-overlapping
lobe ellipsoids that share their transverse radii, which keeps the overlap
lens volume in closed form (two ellipsoidal caps). Kidneys carry a cortex
shell between the outer ellipsoid and a concentric inner one.

Every quantity reported in :class:`OrganTruth` is analytic; nothing is
measured back from the voxelized masks except the ground-truth bounding
boxes, which are by definition voxel objects.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .diff import component_rng
from .errors import ParameterError
from .grid import (
    Box3D,
    LabelMask,
    OrganId,
    Spacing,
    SubregionId,
    SubregionMask,
    VoxelGrid,
    bounding_box_of,
)
from . import volio

Range = tuple[float, float]


@dataclass(frozen=True)
class EllipsoidRanges:
    """Uniform draw ranges for one ellipsoid: center fractions of the FOV."""

    center_frac: tuple[float, float, float]
    radii_mm: tuple[Range, Range, Range]
    jitter_mm: float = 3.0


@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: Spacing = field(default_factory=lambda: Spacing(3.0, 3.0, 3.0))
    noise_sigma: float = 5.0
    intensities: dict = field(
        default_factory=lambda: {
            OrganId.LIVER: 60.0,
            OrganId.RIGHT_KIDNEY: 30.0,
            OrganId.LEFT_KIDNEY: 30.0,
            OrganId.SPLEEN: 50.0,
            OrganId.PROSTATE: 40.0,
        }
    )
    # liver lobes share (cy, cz, ry, rz); rx and center x differ
    liver_right_lobe_rx: Range = (26.0, 30.0)
    liver_left_lobe_rx: Range = (18.0, 21.0)
    liver_ry: Range = (24.0, 27.0)
    liver_rz: Range = (21.0, 24.0)
    liver_center_frac: tuple[float, float, float] = (0.27, 0.48, 0.68)
    liver_lobe_overlap_mm: Range = (5.0, 7.0)
    kidney_right: EllipsoidRanges = field(
        default_factory=lambda: EllipsoidRanges(
            (0.30, 0.66, 0.36), ((15.5, 18.0), (15.5, 18.0), (22.0, 26.0))
        )
    )
    kidney_left: EllipsoidRanges = field(
        default_factory=lambda: EllipsoidRanges(
            (0.72, 0.66, 0.36), ((15.5, 18.0), (15.5, 18.0), (22.0, 26.0))
        )
    )
    spleen: EllipsoidRanges = field(
        default_factory=lambda: EllipsoidRanges(
            (0.81, 0.60, 0.70), ((24.0, 27.0), (17.0, 20.0), (18.0, 21.0))
        )
    )
    prostate: EllipsoidRanges = field(
        default_factory=lambda: EllipsoidRanges(
            (0.51, 0.55, 0.105), ((17.0, 19.0), (22.0, 25.0), (14.0, 16.0))
        )
    )
    cortex_thickness_mm: Range = (4.5, 5.5)


@dataclass(frozen=True)
class OrganTruth:
    volume_cc: float
    length_mm: float
    ap_diameter_mm: float
    box: Box3D | None
    surface_area_cm2: float | None = None
    cortical_thickness_mm: float | None = None
    lobe_volumes_cc: tuple[float, float] | None = None

    def to_dict(self) -> dict:
        d = {
            "volume_cc": self.volume_cc,
            "length_mm": self.length_mm,
            "ap_diameter_mm": self.ap_diameter_mm,
            "box": None if self.box is None else [list(self.box.lo), list(self.box.hi)],
        }
        if self.surface_area_cm2 is not None:
            d["surface_area_cm2"] = self.surface_area_cm2
        if self.cortical_thickness_mm is not None:
            d["cortical_thickness_mm"] = self.cortical_thickness_mm
        if self.lobe_volumes_cc is not None:
            d["lobe_volumes_cc"] = list(self.lobe_volumes_cc)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "OrganTruth":
        box = None if d.get("box") is None else Box3D(tuple(d["box"][0]), tuple(d["box"][1]))
        lobes = d.get("lobe_volumes_cc")
        return cls(
            volume_cc=d["volume_cc"],
            length_mm=d["length_mm"],
            ap_diameter_mm=d["ap_diameter_mm"],
            box=box,
            surface_area_cm2=d.get("surface_area_cm2"),
            cortical_thickness_mm=d.get("cortical_thickness_mm"),
            lobe_volumes_cc=None if lobes is None else tuple(lobes),
        )


@dataclass(frozen=True, eq=False)
class PhantomTruth:
    mask: LabelMask
    subregions: SubregionMask
    organs: dict  # OrganId -> OrganTruth


def ellipsoid_volume_mm3(rx: float, ry: float, rz: float) -> float:
    return 4.0 / 3.0 * np.pi * rx * ry * rz


def ellipsoid_cap_volume_mm3(rx: float, ry: float, rz: float, d: float) -> float:
    """Cap of an axis-aligned ellipsoid cut by the plane x = center + d (d >= 0)."""
    if d >= rx:
        return 0.0
    return np.pi * ry * rz * (2.0 * rx / 3.0 - d + d**3 / (3.0 * rx**2))


def lobe_lens_volume_mm3(x1, rx1, x2, rx2, ry, rz) -> float:
    """Overlap volume of two x-offset ellipsoids sharing (ry, rz)."""
    if x2 - x1 >= rx1 + rx2:
        return 0.0
    x_star = (x1 * rx2 + x2 * rx1) / (rx1 + rx2)
    return ellipsoid_cap_volume_mm3(rx1, ry, rz, x_star - x1) + ellipsoid_cap_volume_mm3(
        rx2, ry, rz, x2 - x_star
    )


def ellipsoid_surface_cm2(rx: float, ry: float, rz: float) -> float:
    """Thomsen approximation (max error about 1%)."""
    p = 1.6075
    s = ((rx * ry) ** p + (rx * rz) ** p + (ry * rz) ** p) / 3.0
    return 4.0 * np.pi * s ** (1.0 / p) / 100.0


def _ellipsoid_mask(coords, center, radii) -> np.ndarray:
    cx, cy, cz = center
    rx, ry, rz = radii
    xs, ys, zs = coords
    # broadcast over the full grid; voxel centers inside or on the surface count
    return (
        ((xs - cx) / rx) ** 2
        + ((ys - cy) / ry) ** 2
        + ((zs - cz) / rz) ** 2
    ) <= 1.0


def _uniform(rng, lo_hi: Range) -> float:
    return float(rng.uniform(lo_hi[0], lo_hi[1]))


def _draw_center(rng, frac, fov, jitter) -> np.ndarray:
    base = np.array(frac) * np.array(fov)
    return base + rng.uniform(-jitter, jitter, size=3)


def _check_inside(center, radii, fov, organ) -> None:
    for c, r, f in zip(center, radii, fov):
        if c - r < 0 or c + r > f:
            raise ParameterError(
                f"dims too small to place {organ}: ellipsoid [{c - r:.1f}, {c + r:.1f}] mm "
                f"exceeds field of view {f:.1f} mm"
            )


def generate_phantom(spec: PhantomSpec, seed: int) -> tuple[VoxelGrid, PhantomTruth]:
    """Deterministic phantom for one seed; see module docstring for layout."""
    rng = component_rng(seed, "phantom")
    dims = spec.dims
    sp = spec.spacing
    fov = (dims[0] * sp.dx, dims[1] * sp.dy, dims[2] * sp.dz)
    xs = (np.arange(dims[0], dtype=np.float64) * sp.dx)[:, None, None]
    ys = (np.arange(dims[1], dtype=np.float64) * sp.dy)[None, :, None]
    zs = (np.arange(dims[2], dtype=np.float64) * sp.dz)[None, None, :]
    coords = (xs, ys, zs)

    labels = np.zeros(dims, dtype=np.uint8)
    subregions = np.zeros(dims, dtype=np.uint8)
    image = np.zeros(dims, dtype=np.float64)
    truths: dict[OrganId, OrganTruth] = {}

    def place(organ: OrganId, mask: np.ndarray):
        if np.any(labels[mask] != 0):
            raise ParameterError(f"{organ.name} overlaps a previously placed organ")
        labels[mask] = int(organ)
        image[mask] = spec.intensities[organ]

    # liver: two x-overlapping lobes sharing (cy, cz, ry, rz)
    liver_center = _draw_center(rng, spec.liver_center_frac, fov, 3.0)
    rx_r = _uniform(rng, spec.liver_right_lobe_rx)
    rx_l = _uniform(rng, spec.liver_left_lobe_rx)
    ry = _uniform(rng, spec.liver_ry)
    rz = _uniform(rng, spec.liver_rz)
    overlap = _uniform(rng, spec.liver_lobe_overlap_mm)
    cx_r = liver_center[0]
    cx_l = cx_r + rx_r + rx_l - overlap
    cy, cz = liver_center[1], liver_center[2]
    _check_inside((cx_r, cy, cz), (rx_r, ry, rz), fov, "liver right lobe")
    _check_inside((cx_l, cy, cz), (rx_l, ry, rz), fov, "liver left lobe")
    lobe_r = _ellipsoid_mask(coords, (cx_r, cy, cz), (rx_r, ry, rz))
    lobe_l = _ellipsoid_mask(coords, (cx_l, cy, cz), (rx_l, ry, rz))
    place(OrganId.LIVER, lobe_r | lobe_l)
    subregions[lobe_r] = int(SubregionId.LIVER_RIGHT_LOBE)
    subregions[lobe_l & ~lobe_r] = int(SubregionId.LIVER_LEFT_LOBE)
    lens = lobe_lens_volume_mm3(cx_r, rx_r, cx_l, rx_l, ry, rz)
    v_r = ellipsoid_volume_mm3(rx_r, ry, rz)
    v_l = ellipsoid_volume_mm3(rx_l, ry, rz)
    liver_truth_partial = {
        "volume_cc": (v_r + v_l - lens) / 1000.0,
        "length_mm": (cx_l + rx_l) - (cx_r - rx_r),
        "ap_diameter_mm": 2.0 * ry,
        "lobe_volumes_cc": (v_r / 1000.0, (v_l - lens) / 1000.0),
    }

    # kidneys with cortex shells
    cortex_specs = {}
    for organ, ranges, code in (
        (OrganId.RIGHT_KIDNEY, spec.kidney_right, SubregionId.RIGHT_KIDNEY_CORTEX),
        (OrganId.LEFT_KIDNEY, spec.kidney_left, SubregionId.LEFT_KIDNEY_CORTEX),
    ):
        center = _draw_center(rng, ranges.center_frac, fov, ranges.jitter_mm)
        radii = tuple(_uniform(rng, r) for r in ranges.radii_mm)
        thickness = _uniform(rng, spec.cortex_thickness_mm)
        _check_inside(center, radii, fov, organ.name)
        outer = _ellipsoid_mask(coords, center, radii)
        inner = _ellipsoid_mask(coords, center, tuple(max(r - thickness, 1.0) for r in radii))
        place(organ, outer)
        subregions[outer & ~inner] = int(code)
        truths[organ] = OrganTruth(
            volume_cc=ellipsoid_volume_mm3(*radii) / 1000.0,
            length_mm=2.0 * max(radii),
            ap_diameter_mm=2.0 * radii[1],
            box=None,
            cortical_thickness_mm=thickness,
        )
        cortex_specs[organ] = (center, radii, thickness)

    # spleen and prostate
    for organ, ranges in ((OrganId.SPLEEN, spec.spleen), (OrganId.PROSTATE, spec.prostate)):
        center = _draw_center(rng, ranges.center_frac, fov, ranges.jitter_mm)
        radii = tuple(_uniform(rng, r) for r in ranges.radii_mm)
        _check_inside(center, radii, fov, organ.name)
        place(organ, _ellipsoid_mask(coords, center, radii))
        truths[organ] = OrganTruth(
            volume_cc=ellipsoid_volume_mm3(*radii) / 1000.0,
            length_mm=2.0 * max(radii),
            ap_diameter_mm=2.0 * radii[1],
            box=None,
            surface_area_cm2=ellipsoid_surface_cm2(*radii) if organ is OrganId.SPLEEN else None,
        )

    if spec.noise_sigma > 0:
        image = image + rng.normal(0.0, spec.noise_sigma, size=dims)

    grid = VoxelGrid(image.astype(np.float32), sp)
    mask = LabelMask(labels, sp)
    sub = SubregionMask(subregions, sp)

    truths[OrganId.LIVER] = OrganTruth(box=bounding_box_of(mask, OrganId.LIVER), **liver_truth_partial)
    for organ in (OrganId.RIGHT_KIDNEY, OrganId.LEFT_KIDNEY, OrganId.SPLEEN, OrganId.PROSTATE):
        t = truths[organ]
        truths[organ] = OrganTruth(
            volume_cc=t.volume_cc,
            length_mm=t.length_mm,
            ap_diameter_mm=t.ap_diameter_mm,
            box=bounding_box_of(mask, organ),
            surface_area_cm2=t.surface_area_cm2,
            cortical_thickness_mm=t.cortical_thickness_mm,
        )
    return grid, PhantomTruth(mask=mask, subregions=sub, organs=truths)


def truth_to_dict(truth: PhantomTruth) -> dict:
    return {organ.name: truth.organs[organ].to_dict() for organ in sorted(truth.organs)}


def truth_from_dict(d: dict) -> dict:
    return {OrganId[name]: OrganTruth.from_dict(v) for name, v in d.items()}


def generate_dataset(count: int, base_seed: int, spec: PhantomSpec, out_dir, threads: int = 1) -> dict:
    """Write ``count`` phantoms plus a manifest under ``out_dir``.

    Per-phantom files: ``<stem>.json/.raw`` (image), ``<stem>_mask``,
    ``<stem>_subregions``, and ``<stem>_truth.json``. Returns the manifest,
    which is also written as ``manifest.json``. Phantoms carry seeds
    ``base_seed + index`` and may be generated in parallel; files are
    written in index order, so the output is identical for any thread count.
    """
    if count < 1:
        raise ParameterError(f"phantom count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    seeds = [base_seed + index for index in range(count)]
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as pool:
            generated = list(pool.map(lambda s: generate_phantom(spec, s), seeds))
    else:
        generated = [generate_phantom(spec, s) for s in seeds]
    cases = []
    for index in range(count):
        seed = seeds[index]
        grid, truth = generated[index]
        stem = f"phantom_{index:03d}"
        volio.write_volume(grid, out_dir / stem)
        volio.write_volume(truth.mask, out_dir / f"{stem}_mask")
        volio.write_volume(truth.subregions, out_dir / f"{stem}_subregions")
        truth_doc = truth_to_dict(truth)
        (out_dir / f"{stem}_truth.json").write_text(
            json.dumps(truth_doc, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
        cases.append({"stem": stem, "seed": seed, "truth": truth_doc})
    manifest = {
        "count": count,
        "base_seed": base_seed,
        "dims": list(spec.dims),
        "spacing_mm": [spec.spacing.dx, spec.spacing.dy, spec.spacing.dz],
        "noise_sigma": spec.noise_sigma,
        "cases": cases,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    return manifest
