import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from imbseg.volume import BoundingBox, LabelMask, Volume, crop, foreground_bbox, uncrop, volume_stats


def vol(values, dims):
    return Volume.from_flat(np.asarray(values, dtype=np.float64), dims)


def test_stats_population_std():
    s = volume_stats(vol([1, 2, 3], (3, 1, 1)))
    assert s.mean == 2.0
    assert s.std == pytest.approx(np.sqrt(2.0 / 3.0), abs=1e-12)
    assert s.std == pytest.approx(0.8165, abs=1e-4)
    assert (s.min, s.max, s.voxel_count) == (1.0, 3.0, 3)


def test_stats_constant_and_single_voxel():
    s = volume_stats(Volume(np.zeros((2, 2, 2))))
    assert (s.mean, s.std) == (0.0, 0.0)
    s = volume_stats(vol([5], (1, 1, 1)), LabelMask(np.ones((1, 1, 1))))
    assert (s.mean, s.std) == (5.0, 0.0)


def test_stats_empty_mask_errors():
    with pytest.raises(ValueError, match="empty statistics region"):
        volume_stats(Volume(np.ones((2, 2, 2))), LabelMask(np.zeros((2, 2, 2))))


def test_stats_masked_region():
    data = np.arange(8, dtype=float).reshape(2, 2, 2)
    m = np.zeros((2, 2, 2))
    m[1] = 1
    s = volume_stats(Volume(data), LabelMask(m))
    assert s.mean == pytest.approx(data[1].mean())
    assert s.voxel_count == 4


def test_construction_rejects_bad_inputs():
    with pytest.raises(ValueError):
        Volume(np.array([[[np.nan]]]))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
    with pytest.raises(ValueError):
        Volume(np.zeros((2, 2, 2)), (1.0, np.inf, 1.0))
    with pytest.raises(ValueError):
        LabelMask(np.full((2, 2, 2), 2))


def test_flat_order_is_x_fastest():
    v = vol(np.arange(24), (2, 3, 4))
    assert v.data[1, 0, 0] == 1
    assert v.data[0, 1, 0] == 2
    assert v.data[0, 0, 1] == 6
    np.testing.assert_array_equal(v.flat, np.arange(24))


def test_volume_is_immutable():
    v = Volume(np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_bbox_point_full_and_pair():
    a = np.zeros((4, 4, 4))
    a[1, 2, 3] = 7
    assert foreground_bbox(Volume(a)) == BoundingBox((1, 2, 3), (1, 2, 3))
    assert foreground_bbox(Volume(np.ones((4, 4, 4)))) == BoundingBox((0, 0, 0), (3, 3, 3))
    a = np.zeros((4, 4, 4))
    a[0, 0, 0] = 1
    a[3, 1, 0] = -2
    idx = np.argwhere(a != 0)
    assert foreground_bbox(Volume(a)) == BoundingBox(tuple(idx.min(0)), tuple(idx.max(0)))
    assert foreground_bbox(Volume(a)) == BoundingBox((0, 0, 0), (3, 1, 0))


def test_bbox_all_zero_errors():
    with pytest.raises(ValueError, match="no nonzero region"):
        foreground_bbox(Volume(np.zeros((3, 3, 3))))


def test_crop_identity_and_inner_block():
    data = np.random.default_rng(0).standard_normal((4, 4, 4))
    v = Volume(data, (0.5, 0.5, 2.0))
    full = crop(v, BoundingBox.full(v.dims))
    np.testing.assert_array_equal(full.data, v.data)
    inner = crop(v, BoundingBox((1, 1, 1), (2, 2, 2)))
    assert inner.dims == (2, 2, 2)
    assert inner.spacing == v.spacing
    for i, j, k in np.ndindex(2, 2, 2):
        assert inner.data[i, j, k] == data[i + 1, j + 1, k + 1]


def test_crop_mask_keeps_binary_values():
    m = LabelMask(np.random.default_rng(1).integers(0, 2, (4, 4, 4)))
    c = crop(m, BoundingBox((0, 1, 0), (3, 2, 1)))
    assert isinstance(c, LabelMask)
    assert set(np.unique(c.data)) <= {0, 1}


def test_crop_out_of_range_errors():
    with pytest.raises(ValueError):
        crop(Volume(np.ones((4, 4, 4))), BoundingBox((0, 0, 0), (4, 3, 3)))


sparse_volumes = st.integers(0, 2**32 - 1).map(
    lambda s: np.where(np.random.default_rng(s).random((6, 5, 4)) < 0.15, np.random.default_rng(s + 1).standard_normal((6, 5, 4)), 0.0)
)


@settings(max_examples=60, deadline=None)
@given(sparse_volumes)
def test_bbox_tight_and_uncrop_restores(data):
    if not np.any(data != 0):
        return
    v = Volume(data)
    box = foreground_bbox(v)
    c = crop(v, box)
    assert np.count_nonzero(c.data) == np.count_nonzero(data)
    for axis in range(3):
        for end in (0, -1):
            slab = np.take(c.data, end, axis=axis)
            assert np.any(slab != 0)
    np.testing.assert_array_equal(uncrop(c, box, v.dims).data, data)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_stats_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    data = rng.standard_normal((3, 4, 5))
    perm = rng.permutation(data.ravel()).reshape(data.shape)
    a, b = volume_stats(Volume(data)), volume_stats(Volume(perm))
    assert a.mean == pytest.approx(b.mean, abs=1e-12)
    assert a.std == pytest.approx(b.std, abs=1e-12)
    assert (a.min, a.max) == (b.min, b.max)
