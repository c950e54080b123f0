import numpy as np
import pytest

from ctabd.errors import ParameterError
from ctabd.grid import LabelMask, OrganId, Spacing, linear_index
from ctabd.postproc import connected_components, keep_largest_component, remove_small_components
from oracles import flood_fill_components


def _mask(labels):
    return LabelMask(np.asarray(labels, np.uint8), Spacing(1, 1, 1))


def test_empty_mask_has_no_components():
    comps = connected_components(_mask(np.zeros((4, 4, 4))))
    assert comps.components == ()
    assert not comps.component_ids.any()


def test_single_voxel_component():
    labels = np.zeros((4, 4, 4), np.uint8)
    labels[1, 2, 3] = 2
    comps = connected_components(_mask(labels))
    assert len(comps.components) == 1
    c = comps.components[0]
    assert c.voxel_count == 1 and c.organ == OrganId.RIGHT_KIDNEY
    assert c.box.lo == (1, 2, 3) and c.box.hi == (2, 3, 4)


def test_diagonal_connectivity():
    labels = np.zeros((3, 3, 3), np.uint8)
    labels[0, 0, 0] = 1
    labels[1, 1, 1] = 1
    assert len(connected_components(_mask(labels), 26).components) == 1
    assert len(connected_components(_mask(labels), 6).components) == 2


def test_invalid_connectivity():
    with pytest.raises(ParameterError):
        connected_components(_mask(np.zeros((2, 2, 2))), 18)


def test_components_match_flood_fill_oracle(rng):
    for _ in range(60):
        dims = tuple(rng.integers(3, 17, 3))
        labels = np.zeros(dims, np.uint8)
        fill = rng.random(dims) < rng.uniform(0.05, 0.4)
        labels[fill] = rng.integers(1, 6, int(fill.sum()))
        for connectivity in (6, 26):
            comps = connected_components(_mask(labels), connectivity)
            oracle = flood_fill_components(labels, connectivity)
            got = {
                (int(c.organ), frozenset(map(tuple, np.argwhere(comps.component_ids == c.id))))
                for c in comps.components
            }
            want = {(organ, frozenset(vox)) for organ, vox in oracle}
            assert got == want


def test_component_ids_dense_and_ordered(rng):
    labels = np.zeros((10, 10, 10), np.uint8)
    labels[0:2, 0:2, 0:2] = 1
    labels[5:7, 5:7, 5:7] = 3
    labels[8:10, 0:2, 0:2] = 1
    comps = connected_components(_mask(labels))
    ids = [c.id for c in comps.components]
    assert ids == [1, 2, 3]
    lins = [c.min_linear_index for c in comps.components]
    assert lins == sorted(lins)


def test_small_component_boundary():
    labels = np.zeros((20, 20, 20), np.uint8)
    # a 99-voxel blob: 7x7x2 = 98 plus one attached voxel
    labels[1:8, 1:8, 1:3] = 1
    labels[1, 1, 3] = 1
    assert int((labels == 1).sum()) == 99
    cleaned = remove_small_components(_mask(labels), 100)
    assert not cleaned.labels.any()
    labels[2, 1, 3] = 1  # now exactly 100
    kept = remove_small_components(_mask(labels), 100)
    assert int((kept.labels == 1).sum()) == 100


def test_remove_small_empty_mask():
    cleaned = remove_small_components(_mask(np.zeros((4, 4, 4))))
    assert not cleaned.labels.any()


def test_remove_small_keeps_large(rng):
    labels = np.zeros((20, 20, 20), np.uint8)
    labels[0:4, 0:4, 0:4] = 2          # 64 voxels < 100
    labels[10:16, 10:16, 10:16] = 2    # 216 voxels >= 100
    cleaned = remove_small_components(_mask(labels), 100)
    oracle = flood_fill_components(np.asarray(cleaned.labels), 26)
    assert len(oracle) == 1 and len(oracle[0][1]) == 216


def test_removal_never_adds_voxels(rng):
    for _ in range(10):
        labels = np.zeros((12, 12, 12), np.uint8)
        fill = rng.random((12, 12, 12)) < 0.2
        labels[fill] = rng.integers(1, 6, int(fill.sum()))
        mask = _mask(labels)
        cleaned = remove_small_components(mask, 5)
        for organ in OrganId:
            before = set(map(tuple, np.argwhere(labels == int(organ))))
            after = set(map(tuple, np.argwhere(cleaned.labels == int(organ))))
            assert after <= before


def test_remove_small_idempotent(rng):
    labels = np.zeros((14, 14, 14), np.uint8)
    fill = rng.random((14, 14, 14)) < 0.25
    labels[fill] = rng.integers(1, 6, int(fill.sum()))
    once = remove_small_components(_mask(labels), 8)
    twice = remove_small_components(once, 8)
    np.testing.assert_array_equal(once.labels, twice.labels)


def test_keep_largest_single_component_unchanged():
    labels = np.zeros((6, 6, 6), np.uint8)
    labels[2:4, 2:4, 2:4] = 4
    mask = _mask(labels)
    out = keep_largest_component(mask, OrganId.SPLEEN)
    np.testing.assert_array_equal(out.labels, labels)


def test_keep_largest_by_count():
    labels = np.zeros((20, 20, 20), np.uint8)
    labels[0:2, 0:2, 0:2] = 5            # 8 voxels
    labels[5:13, 5:13, 5:13] = 5         # 512 voxels
    out = keep_largest_component(_mask(labels), OrganId.PROSTATE)
    assert int((out.labels == 5).sum()) == 512
    assert not out.labels[0, 0, 0]


def test_keep_largest_tie_break_smallest_linear_index():
    labels = np.zeros((10, 10, 10), np.uint8)
    labels[6:8, 6:8, 6:8] = 1  # placed "later" in linear order
    labels[0:2, 0:2, 0:2] = 1  # equal size, smaller linear index
    out = keep_largest_component(_mask(labels), OrganId.LIVER)
    assert out.labels[0, 0, 0] == 1
    assert not out.labels[6, 6, 6]
    # other organs untouched
    labels2 = labels.copy()
    labels2[9, 9, 9] = 2
    out2 = keep_largest_component(_mask(labels2), OrganId.LIVER)
    assert out2.labels[9, 9, 9] == 2
