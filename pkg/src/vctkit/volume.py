"""Voxel grids, CT volumes, and label maps.

World convention is RAS: axis 0 grows toward patient Right, axis 1 toward
Anterior, axis 2 toward Superior.  A voxel's world position is
``origin + index * spacing`` (mm).  Arrays are indexed ``[x, y, z]``; the
serialized linear order is x-fastest::

    linear = x + dims[0] * (y + dims[1] * z)

which corresponds to Fortran raveling of the ``[x, y, z]`` array.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HU_MIN = -1024
HU_MAX = 3071

VOLUME_UNITS = ("HU", "g_per_cm3")
VOLUME_DTYPES = {"int16": np.int16, "float32": np.float32}
LABEL_DTYPES = {"uint8": np.uint8, "uint16": np.uint16}

TISSUE_CLASSES = {
    0: "background",
    1: "body",
    2: "fat",
    3: "muscle",
    4: "bone",
}

STRUCTURE_CLASSES = {
    1: "bone",
    2: "spleen",
    3: "kidney",
    4: "liver",
    5: "lung_upper_lobes",
    6: "lung_lower_lobes",
    7: "lung_middle_lobe",
    8: "urinary_bladder",
    9: "prostate",
    10: "heart",
    11: "aorta",
    12: "gluteus_muscles",
    13: "autochthonous_muscles",
    14: "iliopsoas",
    15: "brain",
    16: "appendicular_bones",
}

LANDMARK_CLASSES = {
    20: "c1",
    21: "c2",
    22: "c7",
    23: "femur_left",
    24: "femur_right",
    25: "tibia_left",
    26: "tibia_right",
    27: "hip_left",
    28: "hip_right",
    29: "clavicle_left",
    30: "clavicle_right",
    31: "scapula_left",
    32: "scapula_right",
}

# full class table of a structure map: merged organ classes plus landmarks
STRUCTURE_TABLE = {**STRUCTURE_CLASSES, **LANDMARK_CLASSES}

LANDMARK_PAIRS = {
    "hip": (27, 28),
    "clavicle": (29, 30),
    "scapula": (31, 32),
}


class FormatError(ValueError):
    """Malformed file header or payload."""


@dataclass(frozen=True)
class Grid:
    """Geometry of a voxel grid in the RAS world frame."""

    dims: tuple[int, int, int]
    spacing_mm: tuple[float, float, float]
    origin_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)
    orientation: str = "RAS"

    def __post_init__(self):
        if len(self.dims) != 3 or any(int(d) != d or d < 1 for d in self.dims):
            raise ValueError(f"dims must be three positive integers, got {self.dims}")
        if len(self.spacing_mm) != 3 or any(
            not math.isfinite(s) or s <= 0 for s in self.spacing_mm
        ):
            raise ValueError(f"spacing_mm must be three positive numbers, got {self.spacing_mm}")
        if len(self.origin_mm) != 3 or any(not math.isfinite(o) for o in self.origin_mm):
            raise ValueError(f"origin_mm must be three finite numbers, got {self.origin_mm}")
        if self.orientation != "RAS":
            raise ValueError(f"orientation must be 'RAS', got {self.orientation!r}")
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def n_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Map an (N, 3) array of voxel indices to world mm coordinates."""
        idx = np.asarray(idx, dtype=np.float64)
        return idx * np.asarray(self.spacing_mm) + np.asarray(self.origin_mm)

    def axis_coords(self, axis: int) -> np.ndarray:
        """World coordinates of voxel centers along one axis."""
        return (
            np.arange(self.dims[axis], dtype=np.float64) * self.spacing_mm[axis]
            + self.origin_mm[axis]
        )


def voxel_volume_mm3(grid: Grid) -> float:
    sx, sy, sz = grid.spacing_mm
    return sx * sy * sz


def linear_index(dims: tuple[int, int, int], x, y, z):
    """x-fastest linear index of voxel (x, y, z)."""
    return x + dims[0] * (y + dims[1] * z)


def unravel_index(dims: tuple[int, int, int], linear):
    """Inverse of :func:`linear_index`."""
    x = linear % dims[0]
    rest = linear // dims[0]
    return x, rest % dims[1], rest // dims[1]


def clamp_hu(data: np.ndarray) -> np.ndarray:
    """Clamp HU values into [-1024, 3071] (applied at load time)."""
    return np.clip(data, HU_MIN, HU_MAX)


def _check_shape(grid: Grid, data: np.ndarray, what: str):
    if tuple(data.shape) != grid.dims:
        raise ValueError(f"{what} shape {data.shape} does not match grid dims {grid.dims}")


@dataclass(frozen=True)
class Volume:
    """A scalar image on a grid; HU or g/cm^3 values."""

    grid: Grid
    data: np.ndarray
    unit: str = "HU"

    def __post_init__(self):
        _check_shape(self.grid, self.data, "volume")
        if self.data.dtype not in (np.int16, np.float32):
            raise ValueError(f"volume dtype must be int16 or float32, got {self.data.dtype}")
        if self.unit not in VOLUME_UNITS:
            raise ValueError(f"unit must be one of {VOLUME_UNITS}, got {self.unit!r}")

    @property
    def dtype_name(self) -> str:
        return str(self.data.dtype)


@dataclass(frozen=True)
class LabelMap:
    """An integer label image; either a tissue map or a structure map."""

    grid: Grid
    data: np.ndarray
    kind: str
    class_table: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        _check_shape(self.grid, self.data, "label map")
        if self.data.dtype not in (np.uint8, np.uint16):
            raise ValueError(f"label dtype must be uint8 or uint16, got {self.data.dtype}")
        if self.kind not in ("tissue", "structure"):
            raise ValueError(f"kind must be 'tissue' or 'structure', got {self.kind!r}")
        counts = np.bincount(self.data.ravel())
        present = np.nonzero(counts)[0]
        unknown = [int(v) for v in present if v != 0 and int(v) not in self.class_table]
        if unknown:
            raise ValueError(f"label values {unknown} missing from class_table")

    def mask(self, label: int) -> np.ndarray:
        return self.data == label

    def body_mask(self) -> np.ndarray:
        return self.data != 0

    @property
    def dtype_name(self) -> str:
        return str(self.data.dtype)


def _resample_axis_linear(data: np.ndarray, axis: int, src: np.ndarray) -> np.ndarray:
    """Linear interpolation along one axis at fractional source indices.

    Uses the lerp form v0 + f * (v1 - v0) so constant inputs are reproduced
    exactly.  Edge coordinates clamp to the boundary sample.
    """
    n = data.shape[axis]
    if n == 1:
        return np.take(data, np.zeros(len(src), dtype=np.intp), axis=axis)
    lo = np.clip(np.floor(src).astype(np.intp), 0, n - 2)
    frac = np.clip(src - lo, 0.0, 1.0)
    shape = [1, 1, 1]
    shape[axis] = len(src)
    frac = frac.reshape(shape)
    v0 = np.take(data, lo, axis=axis)
    v1 = np.take(data, lo + 1, axis=axis)
    return v0 + frac * (v1 - v0)


def _target_dims(grid: Grid, target: tuple[float, float, float]) -> tuple[int, int, int]:
    return tuple(
        max(1, int(math.ceil(grid.dims[a] * grid.spacing_mm[a] / target[a]))) for a in range(3)
    )


def resample(obj, target_spacing_mm, mode: str | None = None):
    """Resample a Volume (trilinear) or LabelMap (nearest) to a new spacing.

    The output grid keeps the input origin; output voxel ``j`` samples the
    source at fractional index ``j * target / source`` per axis, so world
    positions are preserved and the world extent changes by less than one
    voxel.  Identical spacing returns the data unchanged.
    """
    target = tuple(float(s) for s in target_spacing_mm)
    if len(target) != 3 or any(not math.isfinite(s) or s <= 0 for s in target):
        raise ValueError(f"target spacing must be three positive numbers, got {target}")
    is_labels = isinstance(obj, LabelMap)
    if mode is None:
        mode = "nearest" if is_labels else "trilinear"
    if mode not in ("trilinear", "nearest"):
        raise ValueError(f"mode must be 'trilinear' or 'nearest', got {mode!r}")
    if is_labels and mode == "trilinear":
        raise ValueError("label maps must be resampled with nearest mode")

    grid = obj.grid
    if target == grid.spacing_mm:
        return obj

    dims_out = _target_dims(grid, target)
    new_grid = Grid(dims_out, target, grid.origin_mm, grid.orientation)
    src_coords = [
        np.arange(dims_out[a], dtype=np.float64) * (target[a] / grid.spacing_mm[a])
        for a in range(3)
    ]

    if mode == "nearest":
        data = obj.data
        for a in range(3):
            idx = np.clip(np.rint(src_coords[a]).astype(np.intp), 0, grid.dims[a] - 1)
            data = np.take(data, idx, axis=a)
        if is_labels:
            return LabelMap(new_grid, data, obj.kind, dict(obj.class_table))
        return Volume(new_grid, data, obj.unit)

    work = obj.data.astype(np.float64)
    for a in range(3):
        work = _resample_axis_linear(work, a, src_coords[a])
    if obj.data.dtype == np.int16:
        out = np.clip(np.rint(work), HU_MIN if obj.unit == "HU" else np.iinfo(np.int16).min,
                      HU_MAX if obj.unit == "HU" else np.iinfo(np.int16).max).astype(np.int16)
    else:
        out = work.astype(np.float32)
    return Volume(new_grid, out, obj.unit)
