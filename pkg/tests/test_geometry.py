import numpy as np
import pytest

from ctabd.geometry import (
    ap_diameter_mm,
    cortical_thickness_mm,
    euclidean_distance_transform,
    lobe_volumes_cc,
    organ_length_mm,
    organ_volume_cc,
    surface_area_cm2,
)
from ctabd.grid import LabelMask, OrganId, Spacing, SubregionId, SubregionMask
from oracles import distance_transform_bruteforce


def _mask(labels, spacing=Spacing(1, 1, 1)):
    return LabelMask(np.asarray(labels, np.uint8), spacing)


def _ellipsoid(dims, center, radii, spacing=(1.0, 1.0, 1.0)):
    xs = np.arange(dims[0])[:, None, None] * spacing[0]
    ys = np.arange(dims[1])[None, :, None] * spacing[1]
    zs = np.arange(dims[2])[None, None, :] * spacing[2]
    return (((xs - center[0]) / radii[0]) ** 2
            + ((ys - center[1]) / radii[1]) ** 2
            + ((zs - center[2]) / radii[2]) ** 2) <= 1.0


# -- volume ---------------------------------------------------------------------

def test_volume_single_voxel():
    labels = np.zeros((3, 3, 3), np.uint8)
    labels[1, 1, 1] = 1
    assert organ_volume_cc(_mask(labels), OrganId.LIVER) == pytest.approx(0.001)


def test_volume_block():
    labels = np.zeros((12, 12, 12), np.uint8)
    labels[1:11, 1:11, 1:11] = 1
    assert organ_volume_cc(_mask(labels), OrganId.LIVER) == pytest.approx(1.0)


def test_volume_absent_organ():
    assert organ_volume_cc(_mask(np.zeros((3, 3, 3))), OrganId.SPLEEN) is None


def test_volume_ellipsoid_within_two_percent():
    radii = (30.0, 20.0, 15.0)
    region = _ellipsoid((70, 70, 70), (34.5, 34.5, 34.5), radii)
    labels = np.where(region, 1, 0)
    vol = organ_volume_cc(_mask(labels), OrganId.LIVER)
    analytic = 4.0 / 3.0 * np.pi * radii[0] * radii[1] * radii[2] / 1000.0
    assert abs(vol - analytic) / analytic < 0.02


# -- length ----------------------------------------------------------------------

def test_length_voxel_line():
    labels = np.zeros((3, 3, 24), np.uint8)
    labels[1, 1, 2:22] = 2
    assert organ_length_mm(_mask(labels), OrganId.RIGHT_KIDNEY) == pytest.approx(20.0)


def test_length_scales_with_spacing():
    labels = np.zeros((3, 3, 24), np.uint8)
    labels[1, 1, 2:22] = 2
    m = _mask(labels, Spacing(1, 1, 2))
    assert organ_length_mm(m, OrganId.RIGHT_KIDNEY) == pytest.approx(40.0)


def test_length_ellipsoid_within_three_percent():
    radii = (30.0, 20.0, 15.0)
    region = _ellipsoid((70, 56, 46), (34.2, 27.3, 22.6), radii)
    labels = np.where(region, 2, 0)
    length = organ_length_mm(_mask(labels), OrganId.RIGHT_KIDNEY)
    assert abs(length - 60.0) / 60.0 < 0.03


def test_length_absent_with_one_voxel():
    labels = np.zeros((3, 3, 3), np.uint8)
    labels[0, 0, 0] = 2
    assert organ_length_mm(_mask(labels), OrganId.RIGHT_KIDNEY) is None


# -- AP diameter -------------------------------------------------------------------

def test_ap_single_voxel():
    labels = np.zeros((3, 3, 3), np.uint8)
    labels[1, 1, 1] = 5
    assert ap_diameter_mm(_mask(labels), OrganId.PROSTATE) == pytest.approx(1.0)


def test_ap_column():
    labels = np.zeros((3, 14, 3), np.uint8)
    labels[1, 2:12, 1] = 5
    m = _mask(labels, Spacing(1, 2, 1))
    assert ap_diameter_mm(m, OrganId.PROSTATE) == pytest.approx(20.0)


def test_ap_sphere_within_two_voxels():
    region = _ellipsoid((40, 40, 40), (19.5, 19.5, 19.5), (15.0, 15.0, 15.0))
    labels = np.where(region, 5, 0)
    ap = ap_diameter_mm(_mask(labels), OrganId.PROSTATE)
    assert abs(ap - 30.0) <= 2.0


# -- surface area --------------------------------------------------------------------

def test_surface_single_voxel():
    labels = np.zeros((3, 3, 3), np.uint8)
    labels[1, 1, 1] = 4
    assert surface_area_cm2(_mask(labels), OrganId.SPLEEN) == pytest.approx(0.06)


def test_surface_cube_exact():
    labels = np.zeros((12, 12, 12), np.uint8)
    labels[1:11, 1:11, 1:11] = 4
    assert surface_area_cm2(_mask(labels), OrganId.SPLEEN) == pytest.approx(6.0)


def test_surface_boundary_faces_count():
    labels = np.full((10, 10, 10), 4, np.uint8)  # fills the whole grid
    assert surface_area_cm2(_mask(labels), OrganId.SPLEEN) == pytest.approx(6.0)


def test_surface_sphere_inflation_constant():
    # face counting inflates smooth surfaces by ~1.5
    for r in (10.0, 15.0, 20.0):
        n = int(2 * r + 12)
        c = (n - 1) / 2.0
        region = _ellipsoid((n, n, n), (c, c, c), (r, r, r))
        labels = np.where(region, 4, 0)
        area = surface_area_cm2(_mask(labels), OrganId.SPLEEN)
        analytic = 4 * np.pi * r * r / 100.0
        assert 1.5 * 0.9 < area / analytic < 1.5 * 1.1


# -- distance transform ------------------------------------------------------------------

def test_edt_background_zero():
    region = np.zeros((4, 4, 4), bool)
    region[1:3, 1:3, 1:3] = True
    d = euclidean_distance_transform(region, Spacing(1, 1, 1))
    assert d[0, 0, 0] == 0.0


def test_edt_block_center():
    region = np.zeros((9, 9, 9), bool)
    region[2:7, 2:7, 2:7] = True
    d = euclidean_distance_transform(region, Spacing(1, 1, 1))
    assert d[4, 4, 4] == pytest.approx(3.0)


def test_edt_matches_bruteforce_oracle(rng):
    for _ in range(50):
        dims = tuple(rng.integers(3, 13, 3))
        region = rng.random(dims) < rng.uniform(0.2, 0.8)
        region[0, 0, 0] = False  # keep at least one background voxel
        sp = rng.uniform(0.5, 3.0, 3)
        got = euclidean_distance_transform(region, Spacing(*sp))
        want = distance_transform_bruteforce(region, sp)
        np.testing.assert_allclose(got, want, atol=1e-9)


# -- cortical thickness ----------------------------------------------------------------------

def _slab_fixture(spacing=Spacing(1, 1, 1)):
    shape = (24, 24, 9)
    labels = np.zeros(shape, np.uint8)
    codes = np.zeros(shape, np.uint8)
    labels[2:22, 2:22, 3:6] = int(OrganId.RIGHT_KIDNEY)
    codes[2:22, 2:22, 3:6] = int(SubregionId.RIGHT_KIDNEY_CORTEX)
    return LabelMask(labels, spacing), SubregionMask(codes, spacing)


def test_cortical_thickness_slab():
    mask, sub = _slab_fixture()
    t = cortical_thickness_mm(mask, sub, OrganId.RIGHT_KIDNEY)
    assert t == pytest.approx(3.0, abs=0.5)


def test_cortical_thickness_scales_with_spacing():
    m1, s1 = _slab_fixture(Spacing(1, 1, 1))
    m2, s2 = _slab_fixture(Spacing(2, 2, 2))
    t1 = cortical_thickness_mm(m1, s1, OrganId.RIGHT_KIDNEY)
    t2 = cortical_thickness_mm(m2, s2, OrganId.RIGHT_KIDNEY)
    assert t2 == pytest.approx(2 * t1)


def test_cortical_thickness_empty_cortex():
    mask, _ = _slab_fixture()
    empty = SubregionMask(np.zeros(mask.dims, np.uint8), mask.spacing)
    assert cortical_thickness_mm(mask, empty, OrganId.RIGHT_KIDNEY) is None
    assert cortical_thickness_mm(mask, None, OrganId.RIGHT_KIDNEY) is None


# -- lobe volumes --------------------------------------------------------------------------

def test_lobes_partition_sums_to_total():
    labels = np.zeros((10, 10, 10), np.uint8)
    codes = np.zeros((10, 10, 10), np.uint8)
    labels[1:9, 1:9, 1:9] = int(OrganId.LIVER)
    codes[1:5, 1:9, 1:9] = int(SubregionId.LIVER_RIGHT_LOBE)
    codes[5:9, 1:9, 1:9] = int(SubregionId.LIVER_LEFT_LOBE)
    mask, sub = _mask(labels), SubregionMask(codes, Spacing(1, 1, 1))
    right, left = lobe_volumes_cc(mask, sub)
    total = organ_volume_cc(mask, OrganId.LIVER)
    assert right + left == pytest.approx(total)


def test_lobes_one_empty():
    labels = np.zeros((8, 8, 8), np.uint8)
    codes = np.zeros((8, 8, 8), np.uint8)
    labels[1:7, 1:7, 1:7] = int(OrganId.LIVER)
    codes[1:7, 1:7, 1:7] = int(SubregionId.LIVER_RIGHT_LOBE)
    right, left = lobe_volumes_cc(_mask(labels), SubregionMask(codes, Spacing(1, 1, 1)))
    assert right is not None and left is None


def test_lobes_sum_never_exceeds_liver(rng):
    labels = np.zeros((10, 10, 10), np.uint8)
    labels[2:8, 2:8, 2:8] = int(OrganId.LIVER)
    codes = np.zeros((10, 10, 10), np.uint8)
    codes[rng.random((10, 10, 10)) < 0.5] = int(SubregionId.LIVER_RIGHT_LOBE)
    codes[rng.random((10, 10, 10)) < 0.3] = int(SubregionId.LIVER_LEFT_LOBE)
    mask, sub = _mask(labels), SubregionMask(codes, Spacing(1, 1, 1))
    right, left = lobe_volumes_cc(mask, sub)
    total = organ_volume_cc(mask, OrganId.LIVER)
    assert (right or 0.0) + (left or 0.0) <= total + 1e-9


# -- invariances -----------------------------------------------------------------------------

def test_translation_invariance():
    radii = (9.0, 7.0, 5.5)
    base = np.zeros((40, 40, 40), np.uint8)
    base[_ellipsoid((40, 40, 40), (14.2, 14.7, 15.1), radii)] = 4
    shifted = np.roll(base, (5, 7, 3), axis=(0, 1, 2))
    m1, m2 = _mask(base), _mask(shifted)
    assert organ_volume_cc(m1, OrganId.SPLEEN) == organ_volume_cc(m2, OrganId.SPLEEN)
    assert organ_length_mm(m1, OrganId.SPLEEN) == pytest.approx(
        organ_length_mm(m2, OrganId.SPLEEN), abs=1e-9
    )
    assert ap_diameter_mm(m1, OrganId.SPLEEN) == ap_diameter_mm(m2, OrganId.SPLEEN)
    assert surface_area_cm2(m1, OrganId.SPLEEN) == surface_area_cm2(m2, OrganId.SPLEEN)


def test_volume_and_surface_additive_over_disjoint_components():
    a = np.zeros((20, 20, 20), np.uint8)
    a[1:5, 1:5, 1:5] = 4
    b = np.zeros((20, 20, 20), np.uint8)
    b[10:16, 10:16, 10:16] = 4
    both = np.maximum(a, b)
    for fn in (organ_volume_cc, surface_area_cm2):
        va = fn(_mask(a), OrganId.SPLEEN)
        vb = fn(_mask(b), OrganId.SPLEEN)
        vboth = fn(_mask(both), OrganId.SPLEEN)
        assert vboth == pytest.approx(va + vb)


def test_length_at_least_axis_extent(rng):
    for _ in range(10):
        labels = np.zeros((14, 14, 14), np.uint8)
        fill = rng.random((14, 14, 14)) < 0.3
        labels[fill] = 1
        if int(fill.sum()) < 2:
            continue
        m = _mask(labels)
        length = organ_length_mm(m, OrganId.LIVER)
        idx = np.argwhere(labels == 1)
        for axis in range(3):
            extent = float(idx[:, axis].max() - idx[:, axis].min())
            assert length >= extent - 1e-9
