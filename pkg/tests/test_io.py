"""CTV round trips, header validation, and the NIfTI-1 reader."""

import json
import struct

import numpy as np
import pytest

from vctkit.io import load_labelmap, load_volume, save_labelmap, save_volume
from vctkit.volume import FormatError, Grid, LabelMap, Volume


def _vol(dims=(3, 4, 5), dtype=np.int16, unit="HU"):
    rng = np.random.default_rng(0)
    if dtype == np.int16:
        data = rng.integers(-1000, 2000, size=dims).astype(np.int16)
    else:
        data = rng.normal(size=dims).astype(np.float32)
    return Volume(Grid(dims, (1.0, 1.5, 2.0), (3.0, -1.0, 0.0)), data, unit)


def test_volume_round_trip_bitwise(tmp_path):
    vol = _vol()
    save_volume(vol, tmp_path / "img")
    back = load_volume(tmp_path / "img.ctv.json")
    assert back.grid == vol.grid
    assert back.unit == vol.unit
    assert back.data.dtype == np.int16
    np.testing.assert_array_equal(back.data, vol.data)


def test_volume_round_trip_float32(tmp_path):
    vol = _vol(dtype=np.float32, unit="g_per_cm3")
    save_volume(vol, tmp_path / "rho")
    back = load_volume(tmp_path / "rho")
    np.testing.assert_array_equal(back.data, vol.data)


def test_labelmap_round_trip(tmp_path):
    g = Grid((3, 3, 3), (2.0, 2.0, 2.0))
    data = np.zeros(g.dims, dtype=np.uint8)
    data[1, 1, 1] = 2
    data[0, 0, 0] = 4
    lm = LabelMap(g, data, "tissue", {2: "fat", 4: "bone"})
    save_labelmap(lm, tmp_path / "t")
    back = load_labelmap(tmp_path / "t")
    assert back.kind == "tissue"
    assert back.class_table == {2: "fat", 4: "bone"}
    np.testing.assert_array_equal(back.data, lm.data)


def test_payload_is_little_endian_x_fastest(tmp_path):
    g = Grid((2, 2, 1), (1.0, 1.0, 1.0))
    data = np.array([[[1], [3]], [[2], [4]]], dtype=np.int16)  # [x][y][z]
    save_volume(Volume(g, data), tmp_path / "lin")
    raw = (tmp_path / "lin.raw").read_bytes()
    assert np.frombuffer(raw, dtype="<i2").tolist() == [1, 2, 3, 4]


def test_hu_clamped_on_load(tmp_path):
    vol = _vol()
    save_volume(vol, tmp_path / "img")
    raw_path = tmp_path / "img.raw"
    payload = np.frombuffer(raw_path.read_bytes(), dtype="<i2").copy()
    payload[0] = -4096
    payload[1] = 5000
    raw_path.write_bytes(payload.tobytes())
    back = load_volume(tmp_path / "img")
    assert back.data.ravel(order="F")[0] == -1024
    assert back.data.ravel(order="F")[1] == 3071


def test_missing_header_field_raises(tmp_path):
    vol = _vol()
    header_path = save_volume(vol, tmp_path / "img")
    header = json.loads(header_path.read_text())
    del header["spacing_mm"]
    header_path.write_text(json.dumps(header))
    with pytest.raises(FormatError, match="spacing_mm"):
        load_volume(header_path)


def test_payload_size_mismatch_raises(tmp_path):
    vol = _vol()
    save_volume(vol, tmp_path / "img")
    raw = (tmp_path / "img.raw").read_bytes()
    (tmp_path / "img.raw").write_bytes(raw[:-2])
    with pytest.raises(FormatError, match="payload size"):
        load_volume(tmp_path / "img")


def test_kind_mismatch_raises(tmp_path):
    g = Grid((2, 2, 2), (1.0, 1.0, 1.0))
    lm = LabelMap(g, np.zeros(g.dims, dtype=np.uint8), "tissue")
    save_labelmap(lm, tmp_path / "t")
    with pytest.raises(FormatError, match="image"):
        load_volume(tmp_path / "t")
    vol = _vol((2, 2, 2))
    save_volume(vol, tmp_path / "v")
    with pytest.raises(FormatError, match="tissue"):
        load_labelmap(tmp_path / "v")


def test_malformed_json_raises(tmp_path):
    p = tmp_path / "bad.ctv.json"
    p.write_text("{not json")
    (tmp_path / "bad.raw").write_bytes(b"")
    with pytest.raises(FormatError, match="JSON"):
        load_volume(p)


# --- NIfTI-1 ----------------------------------------------------------------


def _write_nifti(path, data: np.ndarray, spacing=(1.0, 1.0, 1.0),
                 srow=None, scl_slope=0.0):
    """Minimal single-file NIfTI-1 writer for tests."""
    dtype_codes = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4,
                   np.dtype(np.float32): 16, np.dtype(np.uint16): 512}
    header = bytearray(348)
    struct.pack_into("<i", header, 0, 348)
    dims = data.shape
    struct.pack_into("<8h", header, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, dtype_codes[data.dtype])
    struct.pack_into("<8f", header, 76, 1.0, *spacing, 0.0, 0.0, 0.0, 0.0)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<2f", header, 112, scl_slope, 0.0)
    if srow is not None:
        struct.pack_into("<2h", header, 252, 0, 1)
        struct.pack_into("<4f", header, 280, *srow[0])
        struct.pack_into("<4f", header, 296, *srow[1])
        struct.pack_into("<4f", header, 312, *srow[2])
    struct.pack_into("4s", header, 344, b"n+1\x00")
    blob = bytes(header) + b"\x00" * 4 + data.tobytes(order="F")
    path.write_bytes(blob)


def test_nifti_identity_affine(tmp_path):
    data = np.arange(24, dtype=np.int16).reshape(2, 3, 4)
    p = tmp_path / "img.nii"
    _write_nifti(p, data, spacing=(1.0, 2.0, 3.0))
    vol = load_volume(p)
    assert vol.grid.dims == (2, 3, 4)
    assert vol.grid.spacing_mm == (1.0, 2.0, 3.0)
    np.testing.assert_array_equal(vol.data, data)


def test_nifti_axis_flip(tmp_path):
    data = np.arange(8, dtype=np.int16).reshape(2, 2, 2)
    srow = [(-1.0, 0.0, 0.0, 1.0), (0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0)]
    p = tmp_path / "flip.nii"
    _write_nifti(p, data, srow=srow)
    vol = load_volume(p)
    np.testing.assert_array_equal(vol.data, data[::-1])


def test_nifti_oblique_rejected(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.int16)
    srow = [(0.9, 0.1, 0.0, 0.0), (-0.1, 0.9, 0.0, 0.0), (0.0, 0.0, 1.0, 0.0)]
    p = tmp_path / "oblique.nii"
    _write_nifti(p, data, srow=srow)
    with pytest.raises(FormatError):
        load_volume(p)


def test_nifti_scaling_rejected(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.int16)
    p = tmp_path / "scaled.nii"
    _write_nifti(p, data, scl_slope=2.0)
    with pytest.raises(FormatError, match="scaling"):
        load_volume(p)


def test_nifti_labelmap(tmp_path):
    data = np.zeros((3, 3, 3), dtype=np.uint8)
    data[1, 1, 1] = 7
    p = tmp_path / "seg.nii"
    _write_nifti(p, data)
    lm = load_labelmap(p)
    assert lm.kind == "structure"
    assert 7 in lm.class_table
    assert lm.data[1, 1, 1] == 7


def test_nifti_truncated_payload(tmp_path):
    data = np.zeros((4, 4, 4), dtype=np.int16)
    p = tmp_path / "trunc.nii"
    _write_nifti(p, data)
    blob = p.read_bytes()
    p.write_bytes(blob[:-10])
    with pytest.raises(FormatError, match="truncated"):
        load_volume(p)
