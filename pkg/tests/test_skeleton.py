"""Patient-frame estimation and segmentwise height on rasterized phantoms."""

import numpy as np
import pytest

from vctkit.skeleton import (
    HeightBreakdown,
    estimate_ras_basis,
    leg_length_mm,
    mask_centroid,
    measure_height,
    pelvis_plane,
    principal_axis,
)
from vctkit.volume import LabelMap


def _diag2(grid):
    return 2.0 * float(np.linalg.norm(grid.spacing_mm))


def test_height_matches_truth(phantom_default):
    spec, vol, tissue, structure, truth = phantom_default
    h = measure_height(tissue, structure)
    assert abs(h.total_mm - truth.height_breakdown["total_mm"]) <= _diag2(vol.grid)


def test_height_matches_truth_second_subject(phantom_small):
    spec, vol, tissue, structure, truth = phantom_small
    h = measure_height(tissue, structure)
    assert abs(h.total_mm - truth.height_breakdown["total_mm"]) <= _diag2(vol.grid)


def test_total_is_exact_segment_sum(phantom_default):
    _, _, tissue, structure, _ = phantom_default
    h = measure_height(tissue, structure)
    assert h.total_mm == h.lower_body_mm + h.torso_mm + h.neck_mm + h.head_mm


def test_per_leg_keys_and_symmetry(phantom_default):
    _, vol, tissue, structure, _ = phantom_default
    h = measure_height(tissue, structure)
    assert set(h.per_leg) == {"left_mm", "right_mm"}
    left, right = h.per_leg["left_mm"], h.per_leg["right_mm"]
    assert left is not None and right is not None
    # the phantom's legs are mirror images
    assert abs(left - right) <= _diag2(vol.grid)
    assert h.lower_body_mm == max(left, right)


def test_missing_required_landmark_raises(phantom_default):
    _, _, tissue, structure, _ = phantom_default
    data = structure.data.copy()
    data[data == 22] = 0  # drop C7
    broken = LabelMap(structure.grid, data, "structure", dict(structure.class_table))
    with pytest.raises(ValueError, match="22"):
        measure_height(tissue, broken)


def test_basis_is_right_handed_orthonormal(phantom_default):
    _, _, tissue, structure, _ = phantom_default
    b = estimate_ras_basis(tissue, structure)
    for v in (b.superior, b.left_right, b.anterior):
        assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)
    assert b.superior @ b.left_right == pytest.approx(0.0, abs=1e-9)
    np.testing.assert_allclose(np.cross(b.superior, b.left_right), b.anterior,
                               atol=1e-9)
    # upright phantom: superior is essentially +z
    assert b.superior[2] > 0.99


def test_pelvis_plane_uses_superior_normal(phantom_default):
    _, _, tissue, structure, _ = phantom_default
    b = estimate_ras_basis(tissue, structure)
    plane = pelvis_plane(structure, b)
    np.testing.assert_allclose(plane.normal, b.superior)


def test_leg_lengths_positive_and_sided(phantom_default):
    _, _, tissue, structure, _ = phantom_default
    b = estimate_ras_basis(tissue, structure)
    left = leg_length_mm("left", structure, tissue, b)
    right = leg_length_mm("right", structure, tissue, b)
    assert left.upper_mm > 0 and left.lower_mm > 0
    assert left.total_mm == left.upper_mm + left.lower_mm
    assert abs(left.total_mm - right.total_mm) < 15.0
    with pytest.raises(ValueError):
        leg_length_mm("both", structure, tissue, b)


def test_spine_axis_vertical(phantom_default):
    _, _, _, structure, _ = phantom_default
    axis = principal_axis(structure, 1)
    assert abs(axis[2]) > 0.99


def test_mask_centroid_labels(phantom_default):
    spec, _, tissue, structure, truth = phantom_default
    c7 = mask_centroid(structure, 22)
    np.testing.assert_allclose(c7, truth.landmarks["c7"],
                               atol=float(max(spec.spacing_mm)))
    with pytest.raises(ValueError):
        mask_centroid(structure, 19)  # unused label


def test_grid_mismatch_raises(phantom_default, phantom_small):
    _, _, tissue, _, _ = phantom_default
    _, _, _, structure, _ = phantom_small
    with pytest.raises(ValueError):
        measure_height(tissue, structure)


def test_breakdown_round_trip():
    h = HeightBreakdown(lower_body_mm=820.0, torso_mm=560.0, neck_mm=130.0,
                        head_mm=240.0, total_mm=1750.0,
                        per_leg={"left_mm": 818.0, "right_mm": 820.0})
    assert HeightBreakdown.from_dict(h.to_dict()) == h
