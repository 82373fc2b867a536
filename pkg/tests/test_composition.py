"""Densitometry: air rule, HU->density mapping, masses, and truth closure."""

import json

import numpy as np
import pytest

from vctkit.composition import (
    CompositionReport,
    DensityConfig,
    adjust_air_hu,
    fit_linear_calibration,
    hu_to_density,
    measure_composition,
    region_mass_g,
)
from vctkit.volume import Grid, LabelMap, Volume


def _hu_volume(values, spacing=(1.0, 1.0, 1.0)):
    data = np.asarray(values, dtype=np.int16)
    return Volume(Grid(data.shape, spacing), data)


def test_air_rule_boundary_inclusive():
    vol = _hu_volume(np.array([-950, -900, -899, 40]).reshape(4, 1, 1))
    out = adjust_air_hu(vol)
    assert out.data.ravel().tolist() == [-1000, -1000, -899, 40]


def test_air_rule_requires_hu():
    rho = Volume(Grid((1, 1, 1), (1, 1, 1)),
                 np.ones((1, 1, 1), dtype=np.float32), "g_per_cm3")
    with pytest.raises(ValueError):
        adjust_air_hu(rho)


def test_density_mapping_fixed_points():
    vol = _hu_volume(np.array([-1000, 0, 500]).reshape(3, 1, 1))
    rho = hu_to_density(vol)
    np.testing.assert_allclose(rho.data.ravel(), [0.0, 1.0, 1.5], atol=1e-7)
    assert rho.unit == "g_per_cm3"


def test_density_mapping_reference_material():
    vol = _hu_volume(np.array([50]).reshape(1, 1, 1))
    rho = hu_to_density(vol, DensityConfig(hu_rho=50.0))
    np.testing.assert_allclose(rho.data.ravel(), [1.0])


def test_density_config_validates_hu_rho():
    with pytest.raises(ValueError):
        DensityConfig(hu_rho=-1000.0)


def test_region_mass_liter_of_water():
    # 10^6 voxels of 0 HU at 1 mm^3 -> density 1 g/cm^3 over one liter
    vol = _hu_volume(np.zeros((100, 100, 100)))
    mass = region_mass_g(hu_to_density(adjust_air_hu(vol)),
                         np.ones(vol.grid.dims, dtype=bool))
    assert mass == pytest.approx(1000.0, rel=1e-12)


def test_region_mass_empty_and_air():
    vol = _hu_volume(np.full((10, 10, 10), -1000))
    rho = hu_to_density(vol)
    assert region_mass_g(rho, np.zeros(vol.grid.dims, dtype=bool)) == 0.0
    assert region_mass_g(rho, np.ones(vol.grid.dims, dtype=bool)) == 0.0


def _tiny_subject():
    g = Grid((4, 1, 1), (10.0, 10.0, 10.0))  # 1 cm^3 voxels
    hu = np.array([0, -100, 50, -1000], dtype=np.int16).reshape(4, 1, 1)
    labels = np.array([1, 2, 3, 0], dtype=np.uint8).reshape(4, 1, 1)
    tissue = LabelMap(g, labels, "tissue", {1: "body", 2: "fat", 3: "muscle"})
    return Volume(g, hu), tissue


def test_measure_composition_hand_case():
    vol, tissue = _tiny_subject()
    rep = measure_composition(vol, tissue)
    # densities: 1.0, 0.9, 1.05 at 1 cm^3 each; air voxel is background
    assert rep.body_mass_g == pytest.approx(2.95)
    assert rep.fat_pct == pytest.approx(100 * 0.9 / 2.95)
    assert rep.muscle_pct == pytest.approx(100 * 1.05 / 2.95)
    assert rep.bone_density_hu is None
    assert rep.body_volume_l == pytest.approx(3 / 1000)
    assert rep.per_tissue_mass_g["fat"] == pytest.approx(0.9)
    assert rep.per_tissue_mass_g["bone"] == 0.0


def test_measure_composition_grid_and_kind_checks():
    vol, tissue = _tiny_subject()
    other = Volume(Grid((4, 1, 1), (1.0, 1.0, 1.0)), vol.data)
    with pytest.raises(ValueError):
        measure_composition(other, tissue)
    structure = LabelMap(tissue.grid, np.zeros(tissue.grid.dims, dtype=np.uint8),
                         "structure")
    with pytest.raises(ValueError):
        measure_composition(vol, structure)


def test_measure_composition_empty_body_raises():
    g = Grid((2, 2, 2), (1.0, 1.0, 1.0))
    vol = Volume(g, np.zeros(g.dims, dtype=np.int16))
    tissue = LabelMap(g, np.zeros(g.dims, dtype=np.uint8), "tissue")
    with pytest.raises(ValueError, match="empty"):
        measure_composition(vol, tissue)


def test_percentages_bounded(phantom_default):
    _, vol, tissue, _, _ = phantom_default
    rep = measure_composition(vol, tissue)
    assert 0 <= rep.fat_pct <= 100
    assert 0 <= rep.muscle_pct <= 100
    assert rep.fat_pct + rep.muscle_pct <= 100
    for mass in rep.per_tissue_mass_g.values():
        assert mass <= rep.body_mass_g


def test_truth_closure_single_phantom(phantom_default):
    _, vol, tissue, _, truth = phantom_default
    rep = measure_composition(vol, tissue)
    assert rep.body_mass_g == pytest.approx(truth.body_mass_g, rel=1e-9)
    assert rep.fat_pct == pytest.approx(truth.fat_pct, abs=1e-9)
    assert rep.muscle_pct == pytest.approx(truth.muscle_pct, abs=1e-9)
    assert rep.bone_density_hu == pytest.approx(truth.bone_density_hu, abs=1e-9)


def test_report_json_round_trip(phantom_default):
    _, vol, tissue, _, _ = phantom_default
    rep = measure_composition(vol, tissue)
    back = CompositionReport.from_dict(json.loads(json.dumps(rep.to_dict())))
    assert back.body_mass_g == pytest.approx(rep.body_mass_g, rel=1e-12)
    assert back.per_tissue_mass_g == rep.per_tissue_mass_g
    assert set(rep.to_dict()) == {"body_mass_kg", "fat_pct", "muscle_pct",
                                  "bone_density_hu", "body_volume_l",
                                  "per_tissue_mass_g", "height"}


def test_linear_calibration_exact_line():
    cal = fit_linear_calibration([1.0, 2.0, 3.0], [3.0, 5.0, 7.0])
    assert cal.slope == pytest.approx(2.0)
    assert cal.intercept == pytest.approx(1.0)
    assert cal.r2 == pytest.approx(1.0)


def test_linear_calibration_constant_measured_warns():
    with pytest.warns(UserWarning):
        cal = fit_linear_calibration([2.0, 2.0, 2.0], [1.0, 2.0, 3.0])
    assert cal.slope == 0.0
    assert cal.intercept == pytest.approx(2.0)
    assert cal.r2 == 0.0
