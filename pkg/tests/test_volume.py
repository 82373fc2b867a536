"""Grid geometry, HU clamping, indexing, and resampling behavior."""

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vctkit.volume import (
    Grid,
    HU_MAX,
    HU_MIN,
    LabelMap,
    Volume,
    clamp_hu,
    linear_index,
    resample,
    unravel_index,
    voxel_volume_mm3,
)


def _grid(dims=(4, 5, 6), spacing=(1.0, 2.0, 3.0), origin=(0.0, 0.0, 0.0)):
    return Grid(dims, spacing, origin)


def test_grid_validation():
    with pytest.raises(ValueError):
        Grid((0, 2, 2), (1, 1, 1))
    with pytest.raises(ValueError):
        Grid((2, 2, 2), (1.0, -1.0, 1.0))
    with pytest.raises(ValueError):
        Grid((2, 2, 2), (1, 1, 1), orientation="LPS")


def test_world_coordinates():
    g = _grid(origin=(10.0, -5.0, 0.5))
    np.testing.assert_allclose(g.index_to_world([[1, 1, 1]]), [[11.0, -3.0, 3.5]])
    np.testing.assert_allclose(g.axis_coords(2), 0.5 + 3.0 * np.arange(6))


def test_voxel_volume():
    assert voxel_volume_mm3(_grid()) == 6.0


@given(st.tuples(st.integers(1, 9), st.integers(1, 9), st.integers(1, 9)),
       st.data())
def test_linear_index_round_trip(dims, data):
    x = data.draw(st.integers(0, dims[0] - 1))
    y = data.draw(st.integers(0, dims[1] - 1))
    z = data.draw(st.integers(0, dims[2] - 1))
    li = linear_index(dims, x, y, z)
    assert 0 <= li < dims[0] * dims[1] * dims[2]
    assert unravel_index(dims, li) == (x, y, z)


def test_linear_index_is_x_fastest():
    assert linear_index((4, 5, 6), 1, 0, 0) == 1
    assert linear_index((4, 5, 6), 0, 1, 0) == 4
    assert linear_index((4, 5, 6), 0, 0, 1) == 20


def test_clamp_hu_bounds():
    data = np.array([-5000, HU_MIN, 0, HU_MAX, 9000], dtype=np.int16)
    clamped = clamp_hu(data)
    assert clamped.tolist() == [HU_MIN, HU_MIN, 0, HU_MAX, HU_MAX]


def test_volume_shape_and_dtype_checks():
    g = _grid()
    good = np.zeros(g.dims, dtype=np.int16)
    Volume(g, good)
    with pytest.raises(ValueError):
        Volume(g, np.zeros((4, 5, 7), dtype=np.int16))
    with pytest.raises(ValueError):
        Volume(g, good.astype(np.int32))
    with pytest.raises(ValueError):
        Volume(g, good, unit="kelvin")


def test_labelmap_requires_class_table_cover():
    g = _grid()
    data = np.zeros(g.dims, dtype=np.uint8)
    data[0, 0, 0] = 3
    with pytest.raises(ValueError):
        LabelMap(g, data, "tissue", {})
    lm = LabelMap(g, data, "tissue", {3: "muscle"})
    assert lm.mask(3).sum() == 1
    assert lm.body_mask().sum() == 1


def test_resample_constant_field_exact():
    g = Grid((8, 8, 8), (2.0, 2.0, 2.0))
    vol = Volume(g, np.full(g.dims, 123.25, dtype=np.float32), "g_per_cm3")
    out = resample(vol, (1.5, 3.0, 2.5))
    assert (out.data == np.float32(123.25)).all()
    assert out.grid.spacing_mm == (1.5, 3.0, 2.5)


def test_resample_identity_spacing_returns_same_object():
    g = Grid((4, 4, 4), (1.0, 1.0, 1.0))
    vol = Volume(g, np.zeros(g.dims, dtype=np.int16))
    assert resample(vol, (1.0, 1.0, 1.0)) is vol


def test_resample_linear_gradient_midpoints():
    # 1-D ramp along x; downsampling by 2 must land exactly between samples
    g = Grid((9, 1, 1), (1.0, 1.0, 1.0))
    ramp = np.arange(9, dtype=np.float32).reshape(9, 1, 1)
    out = resample(Volume(g, ramp, "g_per_cm3"), (2.0, 1.0, 1.0))
    np.testing.assert_allclose(out.data.ravel(), [0.0, 2.0, 4.0, 6.0, 8.0])


def test_resample_labels_nearest_only():
    g = Grid((4, 4, 4), (1.0, 1.0, 1.0))
    data = np.zeros(g.dims, dtype=np.uint8)
    data[:2] = 1
    lm = LabelMap(g, data, "tissue", {1: "body"})
    out = resample(lm, (2.0, 2.0, 2.0))
    assert set(np.unique(out.data)) <= {0, 1}
    with pytest.raises(ValueError):
        resample(lm, (2.0, 2.0, 2.0), mode="trilinear")


def test_resample_int16_h_u_clamps():
    g = Grid((3, 1, 1), (1.0, 1.0, 1.0))
    vol = Volume(g, np.array([HU_MAX, HU_MAX, HU_MAX], dtype=np.int16).reshape(3, 1, 1))
    out = resample(vol, (0.4, 1.0, 1.0))
    assert out.data.max() <= HU_MAX
    assert out.data.dtype == np.int16


def test_resample_world_extent_preserved():
    g = Grid((10, 10, 10), (3.0, 3.0, 3.0), (5.0, 5.0, 5.0))
    vol = Volume(g, np.zeros(g.dims, dtype=np.float32), "g_per_cm3")
    out = resample(vol, (1.0, 1.0, 1.0))
    assert out.grid.origin_mm == g.origin_mm
    for a in range(3):
        src_extent = g.dims[a] * g.spacing_mm[a]
        dst_extent = out.grid.dims[a] * out.grid.spacing_mm[a]
        assert abs(src_extent - dst_extent) < max(g.spacing_mm[a], 1.0)
