import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ctabd.errors import GridBoundsError, MaskValidationError, ParameterError
from ctabd.grid import (
    Box3D,
    LabelMask,
    OrganId,
    Spacing,
    SubregionMask,
    VoxelGrid,
    bounding_box_of,
    crop,
    linear_index,
    unravel_index,
    voxel_volume_mm3,
)
from oracles import bounding_box_scan


def test_voxel_volume_unit_cube():
    assert voxel_volume_mm3(Spacing(1, 1, 1)) == 1.0


def test_voxel_volume_isotropic_target():
    assert voxel_volume_mm3(Spacing(1.5, 1.5, 1.5)) == pytest.approx(3.375)


def test_voxel_volume_anisotropic():
    assert voxel_volume_mm3(Spacing(0.75, 0.75, 3.0)) == pytest.approx(1.6875)


def test_spacing_must_be_positive():
    with pytest.raises(ParameterError):
        Spacing(0.0, 1.0, 1.0)
    with pytest.raises(ParameterError):
        Spacing(1.0, -2.0, 1.0)


def test_organ_ids_bijective_with_codes():
    assert sorted(int(o) for o in OrganId) == [1, 2, 3, 4, 5]
    assert len({o.name for o in OrganId}) == 5


def test_label_mask_rejects_bad_codes():
    with pytest.raises(MaskValidationError):
        LabelMask(np.full((2, 2, 2), 6, np.uint8), Spacing(1, 1, 1))
    with pytest.raises(MaskValidationError):
        SubregionMask(np.full((2, 2, 2), 5, np.uint8), Spacing(1, 1, 1))


def test_grid_data_is_frozen():
    g = VoxelGrid(np.zeros((2, 2, 2), np.float32), Spacing(1, 1, 1))
    with pytest.raises(ValueError):
        g.data[0, 0, 0] = 1.0


@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6))
@settings(max_examples=30, deadline=None)
def test_linear_index_round_trip(nx, ny, nz):
    dims = (nx, ny, nz)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                assert unravel_index(linear_index(x, y, z, dims), dims) == (x, y, z)


def test_bounding_box_single_voxel():
    labels = np.zeros((8, 8, 8), np.uint8)
    labels[3, 4, 5] = int(OrganId.LIVER)
    box = bounding_box_of(LabelMask(labels, Spacing(1, 1, 1)), OrganId.LIVER)
    assert box.lo == (3, 4, 5) and box.hi == (4, 5, 6)


def test_bounding_box_absent_organ():
    mask = LabelMask(np.zeros((4, 4, 4), np.uint8), Spacing(1, 1, 1))
    assert bounding_box_of(mask, OrganId.SPLEEN) is None


def test_bounding_box_two_voxels_vs_scan_oracle():
    labels = np.zeros((5, 4, 3), np.uint8)
    labels[0, 0, 0] = 2
    labels[2, 0, 0] = 2
    box = bounding_box_of(LabelMask(labels, Spacing(1, 1, 1)), OrganId.RIGHT_KIDNEY)
    assert box.lo == (0, 0, 0) and box.hi == (3, 1, 1)
    lo, hi = bounding_box_scan(labels, 2)
    assert (box.lo, box.hi) == (lo, hi)


def test_bounding_box_matches_oracle_on_random_masks(rng):
    for _ in range(25):
        dims = tuple(rng.integers(2, 9, 3))
        labels = (rng.random(dims) < 0.15).astype(np.uint8) * 3
        mask = LabelMask(labels, Spacing(1, 1, 1))
        box = bounding_box_of(mask, OrganId.LEFT_KIDNEY)
        oracle = bounding_box_scan(labels, 3)
        if oracle is None:
            assert box is None
        else:
            assert (box.lo, box.hi) == oracle
            # no tighter box contains all voxels
            assert all(h - l >= 1 for l, h in zip(box.lo, box.hi))


def test_crop_full_grid_identity(rng):
    data = rng.random((4, 5, 6)).astype(np.float32)
    g = VoxelGrid(data, Spacing(1, 2, 3), origin=(1.0, 2.0, 3.0))
    out = crop(g, Box3D((0, 0, 0), (4, 5, 6)))
    np.testing.assert_array_equal(out.data, g.data)
    assert out.origin == g.origin


def test_crop_single_voxel():
    data = np.arange(8, dtype=np.float32).reshape(2, 2, 2)
    g = VoxelGrid(data, Spacing(1, 1, 1))
    out = crop(g, Box3D((0, 0, 0), (1, 1, 1)))
    assert out.dims == (1, 1, 1)
    assert out.data[0, 0, 0] == data[0, 0, 0]


def test_crop_values_follow_linear_index_formula():
    nx, ny, nz = 4, 4, 4
    data = np.empty((nx, ny, nz), np.float32)
    for x in range(nx):
        for y in range(ny):
            for z in range(nz):
                data[x, y, z] = linear_index(x, y, z, (nx, ny, nz))
    g = VoxelGrid(data, Spacing(1, 1, 1))
    out = crop(g, Box3D((1, 1, 1), (3, 3, 3)))
    for x in range(2):
        for y in range(2):
            for z in range(2):
                assert out.data[x, y, z] == linear_index(x + 1, y + 1, z + 1, (nx, ny, nz))


def test_crop_out_of_bounds_rejected():
    g = VoxelGrid(np.zeros((3, 3, 3), np.float32), Spacing(1, 1, 1))
    with pytest.raises(GridBoundsError):
        crop(g, Box3D((0, 0, 0), (4, 3, 3)))


def test_crop_composition(rng):
    data = rng.random((6, 7, 8)).astype(np.float32)
    g = VoxelGrid(data, Spacing(1, 1, 1))
    once = crop(g, Box3D((1, 2, 3), (5, 6, 7)))
    twice = crop(once, Box3D((0, 0, 0), (4, 4, 4)))
    np.testing.assert_array_equal(once.data, twice.data)
    assert once.origin == twice.origin


def test_crop_origin_shift():
    g = VoxelGrid(np.zeros((4, 4, 4), np.float32), Spacing(1.5, 2.0, 2.5))
    out = crop(g, Box3D((1, 2, 3), (2, 3, 4)))
    assert out.origin == (1.5, 4.0, 7.5)


def test_box_validation():
    with pytest.raises(ParameterError):
        Box3D((0, 0, 0), (0, 1, 1))
    b = Box3D((1, 2, 3), (4, 6, 8))
    assert b.extents == (3, 4, 5)
    assert b.volume == 60
