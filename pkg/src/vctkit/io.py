"""File I/O: the CTV header+raw format (read/write) and NIfTI-1 (read only).

A CTV pair is ``name.ctv.json`` plus ``name.raw``.  The header is UTF-8 JSON;
the payload is the raw array little-endian in x-fastest order (linear index
``x + dims[0] * (y + dims[1] * z)``).  NIfTI-1 support covers uncompressed
single-file images with dtype int16/uint8/uint16/float32 whose affine is an
axis permutation/flip; oblique orientations are rejected.  HU volumes are
clamped to [-1024, 3071] on load.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path

import numpy as np

from .volume import (
    FormatError,
    Grid,
    LabelMap,
    Volume,
    LABEL_DTYPES,
    VOLUME_DTYPES,
    VOLUME_UNITS,
    clamp_hu,
)

CTV_SUFFIX = ".ctv.json"
RAW_SUFFIX = ".raw"

_HEADER_FIELDS = ("dims", "spacing_mm", "origin_mm", "orientation", "dtype",
                  "byte_order", "kind", "unit", "data_file")


def _ctv_paths(path) -> tuple[Path, Path, str]:
    header = Path(path)
    if not header.name.endswith(CTV_SUFFIX):
        header = header.with_name(header.name + CTV_SUFFIX)
    name = header.name[: -len(CTV_SUFFIX)]
    return header, header.with_name(name + RAW_SUFFIX), name


def _write_ctv(grid: Grid, data: np.ndarray, kind: str, unit: str,
               class_table: dict[int, str] | None, path) -> Path:
    header_path, raw_path, name = _ctv_paths(path)
    header = {
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing_mm),
        "origin_mm": list(grid.origin_mm),
        "orientation": grid.orientation,
        "dtype": str(data.dtype),
        "byte_order": "little",
        "kind": kind,
        "unit": unit,
    }
    if class_table is not None:
        header["class_table"] = {str(k): v for k, v in sorted(class_table.items())}
    header["data_file"] = raw_path.name
    header_path.write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")
    raw_path.write_bytes(np.ascontiguousarray(data.ravel(order="F")).astype(
        data.dtype.newbyteorder("<")).tobytes())
    return header_path


def save_volume(vol: Volume, path) -> Path:
    """Write a Volume as a CTV pair; returns the header path."""
    return _write_ctv(vol.grid, vol.data, "image", vol.unit, None, path)


def save_labelmap(labels: LabelMap, path) -> Path:
    """Write a LabelMap as a CTV pair; returns the header path."""
    return _write_ctv(labels.grid, labels.data, labels.kind, "label",
                      labels.class_table, path)


def _require(header: dict, field: str):
    if field not in header:
        raise FormatError(f"CTV header missing field {field!r}")
    return header[field]


def _read_ctv(path):
    header_path, _, _ = _ctv_paths(path)
    try:
        header = json.loads(header_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"CTV header is not valid JSON: {e}") from e
    dims = _require(header, "dims")
    spacing = _require(header, "spacing_mm")
    origin = header.get("origin_mm", [0.0, 0.0, 0.0])
    orientation = _require(header, "orientation")
    dtype_name = _require(header, "dtype")
    byte_order = _require(header, "byte_order")
    kind = _require(header, "kind")
    unit = _require(header, "unit")
    data_file = _require(header, "data_file")
    if byte_order != "little":
        raise FormatError(f"byte_order must be 'little', got {byte_order!r}")
    if dtype_name not in {**VOLUME_DTYPES, **LABEL_DTYPES}:
        raise FormatError(f"unsupported dtype {dtype_name!r}")
    if len(dims) != 3 or any(int(d) != d or d < 1 for d in dims):
        raise FormatError(f"dims must be three positive integers, got {dims}")
    try:
        grid = Grid(tuple(int(d) for d in dims), tuple(spacing), tuple(origin), orientation)
    except ValueError as e:
        raise FormatError(str(e)) from e
    dtype = np.dtype({**VOLUME_DTYPES, **LABEL_DTYPES}[dtype_name]).newbyteorder("<")
    raw_path = header_path.with_name(data_file)
    payload = raw_path.read_bytes()
    expected = grid.n_voxels * dtype.itemsize
    if len(payload) != expected:
        raise FormatError(
            f"payload size {len(payload)} does not match dims {grid.dims} "
            f"and dtype {dtype_name} (expected {expected})")
    data = np.frombuffer(payload, dtype=dtype).reshape(grid.dims, order="F")
    return grid, data.astype(dtype.newbyteorder("=")), kind, unit, header


def load_volume(path) -> Volume:
    """Load an image volume from a CTV pair or a NIfTI-1 file."""
    p = Path(path)
    if p.name.endswith(".nii"):
        grid, data = _read_nifti(p)
        if data.dtype not in (np.int16, np.float32):
            raise FormatError(
                f"NIfTI dtype {data.dtype} is not a volume dtype (int16/float32)")
        return Volume(grid, clamp_hu(data), "HU")
    grid, data, kind, unit, _ = _read_ctv(p)
    if kind != "image":
        raise FormatError(f"expected kind 'image', got {kind!r}")
    if unit not in VOLUME_UNITS:
        raise FormatError(f"unsupported unit {unit!r}")
    if str(data.dtype) not in VOLUME_DTYPES:
        raise FormatError(f"dtype {data.dtype} is not a volume dtype")
    if unit == "HU":
        data = clamp_hu(data)
    return Volume(grid, data, unit)


def load_labelmap(path, kind: str | None = None) -> LabelMap:
    """Load a label map from a CTV pair or a NIfTI-1 file.

    NIfTI files carry no class table; one is synthesized from the values
    present, and ``kind`` defaults to "structure".
    """
    p = Path(path)
    if p.name.endswith(".nii"):
        grid, data = _read_nifti(p)
        if data.dtype not in (np.uint8, np.uint16):
            raise FormatError(
                f"NIfTI dtype {data.dtype} is not a label dtype (uint8/uint16)")
        values = np.unique(data)
        table = {int(v): f"class_{int(v)}" for v in values if v != 0}
        return LabelMap(grid, data, kind or "structure", table)
    grid, data, file_kind, unit, header = _read_ctv(p)
    if file_kind not in ("tissue", "structure"):
        raise FormatError(f"expected kind 'tissue' or 'structure', got {file_kind!r}")
    if str(data.dtype) not in LABEL_DTYPES:
        raise FormatError(f"dtype {data.dtype} is not a label dtype")
    raw_table = header.get("class_table", {})
    try:
        table = {int(k): str(v) for k, v in raw_table.items()}
    except (TypeError, ValueError) as e:
        raise FormatError(f"malformed class_table: {e}") from e
    try:
        return LabelMap(grid, data, file_kind, table)
    except ValueError as e:
        raise FormatError(str(e)) from e


# --- NIfTI-1 -----------------------------------------------------------

_NIFTI_DTYPES = {2: np.uint8, 4: np.int16, 16: np.float32, 512: np.uint16}


def _read_nifti(path: Path) -> tuple[Grid, np.ndarray]:
    blob = path.read_bytes()
    if len(blob) < 352:
        raise FormatError("NIfTI file shorter than its 352-byte minimum")
    endian = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        endian = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise FormatError("not a NIfTI-1 file (bad sizeof_hdr)")
    magic = struct.unpack_from("4s", blob, 344)[0]
    if magic not in (b"n+1\x00",):
        raise FormatError(
            "only single-file NIfTI-1 ('n+1') is supported, got magic "
            f"{magic!r}")
    dim = struct.unpack_from(endian + "8h", blob, 40)
    ndim = dim[0]
    if ndim < 3 or any(d > 1 for d in dim[4:1 + ndim]):
        raise FormatError(f"only 3-D NIfTI images are supported, dim={dim}")
    dims = tuple(int(d) for d in dim[1:4])
    if any(d < 1 for d in dims):
        raise FormatError(f"bad NIfTI dims {dims}")
    (datatype,) = struct.unpack_from(endian + "h", blob, 70)
    if datatype not in _NIFTI_DTYPES:
        raise FormatError(f"unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(endian + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(endian + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", blob, 112)
    if scl_slope not in (0.0, 1.0) or scl_inter != 0.0:
        raise FormatError(
            f"NIfTI value scaling unsupported (scl_slope={scl_slope}, "
            f"scl_inter={scl_inter})")
    qform_code, sform_code = struct.unpack_from(endian + "2h", blob, 252)

    if sform_code > 0:
        srow = np.array([
            struct.unpack_from(endian + "4f", blob, 280),
            struct.unpack_from(endian + "4f", blob, 296),
            struct.unpack_from(endian + "4f", blob, 312),
        ], dtype=np.float64)
        direction = srow[:, :3]
        offset = srow[:, 3]
    elif qform_code > 0:
        b, c, d = struct.unpack_from(endian + "3f", blob, 256)
        offset = np.array(struct.unpack_from(endian + "3f", blob, 268), dtype=np.float64)
        a2 = 1.0 - (b * b + c * c + d * d)
        a = math.sqrt(a2) if a2 > 0 else 0.0
        rot = np.array([
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ])
        qfac = -1.0 if pixdim[0] == -1.0 else 1.0
        direction = rot * np.array([pixdim[1], pixdim[2], qfac * pixdim[3]])
    else:
        direction = np.diag([pixdim[1] or 1.0, pixdim[2] or 1.0, pixdim[3] or 1.0])
        offset = np.zeros(3)

    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    start = int(vox_offset)
    if start < 348:
        raise FormatError(f"bad vox_offset {vox_offset}")
    count = dims[0] * dims[1] * dims[2]
    if len(blob) - start < count * dtype.itemsize:
        raise FormatError("NIfTI payload truncated")
    data = np.frombuffer(blob, dtype=dtype, count=count, offset=start)
    data = data.reshape(dims, order="F").astype(dtype.newbyteorder("="))

    # map data axes to world RAS axes; only permutation/flip affines allowed
    spacing = [0.0, 0.0, 0.0]
    perm = [-1, -1, -1]
    flip = [False, False, False]
    for j in range(3):
        col = direction[:, j]
        w = int(np.argmax(np.abs(col)))
        rest = np.abs(col).sum() - abs(col[w])
        if abs(col[w]) <= 0 or rest > 1e-3 * abs(col[w]):
            raise FormatError("oblique NIfTI orientation is unsupported")
        perm[j] = w
        flip[j] = col[w] < 0
        spacing[w] = abs(col[w])
    if sorted(perm) != [0, 1, 2]:
        raise FormatError("degenerate NIfTI orientation")

    origin = np.asarray(offset, dtype=np.float64).copy()
    for j in range(3):
        if flip[j]:
            w = perm[j]
            origin[w] = offset[w] + direction[w, j] * (dims[j] - 1)
            data = np.flip(data, axis=j)
    # move data axis j to world axis perm[j]
    data = np.transpose(data, np.argsort(perm))
    out_dims = tuple(int(n) for n in data.shape)
    grid = Grid(out_dims, tuple(spacing), tuple(float(o) for o in origin))
    return grid, np.ascontiguousarray(data)
