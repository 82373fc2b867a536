"""Patient-frame estimation and segmentwise height measurement.

The superior direction is the principal axis of the body voxel cloud (sign
fixed toward world +z, ties toward +y then +x).  Left-right comes from
paired landmarks (hips, clavicles, scapulae): the mean of left-minus-right
centroid offsets, orthogonalized against superior.  Anterior completes a
right-handed orthonormal triple.

Height is the exact sum of four segments:

* lower body: per leg, the femur-axis distance between the pelvis plane
  (superior-most femur voxel) and the knee plane (superior-most tibia voxel
  after dropping tibia components above the femur's inferior point), plus
  the tibia long axis continued to its exit through the body mask on the
  foot side; the longer leg wins;
* torso: superior-axis distance from the pelvis plane to the C7 centroid;
* neck: euclidean distance between C7 and C1 centroids;
* head: from the C1 centroid along the reversed C1->C2 direction to the
  last body voxel (the crown), marched at half the smallest spacing.

Per-label work runs inside label bounding boxes (one labeling pass over the
grid) so repeated landmark queries stay cheap on large volumes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import Grid, LabelMap, LANDMARK_PAIRS

ISOTROPY_TOL = 1e-9


@dataclass(frozen=True)
class Basis:
    """Orthonormal right-handed patient frame in world coordinates."""

    superior: np.ndarray
    left_right: np.ndarray
    anterior: np.ndarray
    origin: np.ndarray


@dataclass(frozen=True)
class Plane:
    """Plane {p : normal . p = offset}."""

    normal: np.ndarray
    offset: float


@dataclass(frozen=True)
class LegLength:
    upper_mm: float
    lower_mm: float

    @property
    def total_mm(self) -> float:
        return self.upper_mm + self.lower_mm


@dataclass(frozen=True)
class HeightBreakdown:
    lower_body_mm: float
    torso_mm: float
    neck_mm: float
    head_mm: float
    total_mm: float
    per_leg: dict

    def to_dict(self) -> dict:
        return {
            "lower_body_mm": self.lower_body_mm,
            "torso_mm": self.torso_mm,
            "neck_mm": self.neck_mm,
            "head_mm": self.head_mm,
            "total_mm": self.total_mm,
            "per_leg": dict(self.per_leg),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeightBreakdown":
        return cls(lower_body_mm=d["lower_body_mm"], torso_mm=d["torso_mm"],
                   neck_mm=d["neck_mm"], head_mm=d["head_mm"],
                   total_mm=d["total_mm"], per_leg=dict(d["per_leg"]))


def _coords_for(grid: Grid, sl=None):
    cx, cy, cz = grid.axis_coords(0), grid.axis_coords(1), grid.axis_coords(2)
    if sl is None:
        return cx, cy, cz
    return cx[sl[0]], cy[sl[1]], cz[sl[2]]


def _mask_moments(mask: np.ndarray, coords):
    """Voxel count, world-space mean, and covariance of a boolean mask.

    Cross moments come from 2-D projections of the mask, so no voxel
    coordinate list is materialized.
    """
    cx, cy, cz = coords
    p_xy = mask.sum(axis=2, dtype=np.int64).astype(np.float64)
    p_xz = mask.sum(axis=1, dtype=np.int64).astype(np.float64)
    p_yz = mask.sum(axis=0, dtype=np.int64).astype(np.float64)
    nx = p_xy.sum(axis=1)
    n = int(nx.sum())
    if n == 0:
        return 0, None, None
    ny = p_xy.sum(axis=0)
    nz = p_xz.sum(axis=0)
    sx, sy, sz = nx @ cx, ny @ cy, nz @ cz
    sxx, syy, szz = nx @ (cx * cx), ny @ (cy * cy), nz @ (cz * cz)
    sxy = cx @ p_xy @ cy
    sxz = cx @ p_xz @ cz
    syz = cy @ p_yz @ cz
    mean = np.array([sx, sy, sz]) / n
    cov = np.array([
        [sxx / n - mean[0] ** 2, sxy / n - mean[0] * mean[1], sxz / n - mean[0] * mean[2]],
        [sxy / n - mean[0] * mean[1], syy / n - mean[1] ** 2, syz / n - mean[1] * mean[2]],
        [sxz / n - mean[0] * mean[2], syz / n - mean[1] * mean[2], szz / n - mean[2] ** 2],
    ])
    return n, mean, cov


class _LabelIndex:
    """Bounding-box index over a structure map; one pass, cached moments."""

    def __init__(self, structures: LabelMap):
        self.structures = structures
        self.grid = structures.grid
        self._boxes = ndimage.find_objects(structures.data)
        self._moments: dict[int, tuple] = {}

    def box(self, label: int):
        if 1 <= label <= len(self._boxes):
            return self._boxes[label - 1]
        return None

    def present(self, label: int) -> bool:
        return self.box(label) is not None

    def mask(self, label: int):
        """(submask, slice) for a label, or None if absent."""
        sl = self.box(label)
        if sl is None:
            return None
        return self.structures.data[sl] == label, sl

    def moments(self, label: int):
        if label not in self._moments:
            m = self.mask(label)
            if m is None:
                self._moments[label] = (0, None, None)
            else:
                sub, sl = m
                self._moments[label] = _mask_moments(sub, _coords_for(self.grid, sl))
        return self._moments[label]

    def centroid(self, label: int):
        n, mean, _ = self.moments(label)
        return mean if n else None

    def world_coords(self, label: int) -> np.ndarray:
        m = self.mask(label)
        if m is None:
            return np.empty((0, 3))
        sub, sl = m
        idx = np.nonzero(sub)
        lo = np.array([sl[a].start for a in range(3)], dtype=np.float64)
        coords = (np.stack(idx, axis=1) + lo) * np.asarray(self.grid.spacing_mm)
        return coords + np.asarray(self.grid.origin_mm)


def _label_name(labels: LabelMap, label: int) -> str:
    return labels.class_table.get(label, f"label {label}")


def mask_centroid(labels: LabelMap, label: int) -> np.ndarray:
    """World-space centroid of one label; raises if the label is absent."""
    c = _LabelIndex(labels).centroid(label)
    if c is None:
        raise ValueError(f"no voxels with label {label} ({_label_name(labels, label)})")
    return c


def _principal_axis_from_moments(n: int, cov: np.ndarray) -> np.ndarray:
    if n < 3:
        raise ValueError(f"principal axis needs at least 3 voxels, got {n}")
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] - evals[0] <= ISOTROPY_TOL * max(1.0, evals[-1]):
        raise ValueError("degenerate voxel cloud: isotropic covariance")
    axis = evecs[:, -1]
    for comp in (2, 1, 0):
        if abs(axis[comp]) > 1e-12:
            if axis[comp] < 0:
                axis = -axis
            break
    return axis / np.linalg.norm(axis)


def principal_axis(labels: LabelMap, label: int) -> np.ndarray:
    """Unit principal axis of one label's voxel cloud, sign toward +z."""
    n, _, cov = _LabelIndex(labels).moments(label)
    if n == 0:
        raise ValueError(f"no voxels with label {label} ({_label_name(labels, label)})")
    return _principal_axis_from_moments(n, cov)


def _basis_from(index: _LabelIndex, body_moments) -> Basis:
    n, mean, cov = body_moments
    if n == 0:
        raise ValueError("degenerate input: body mask is empty")
    superior = _principal_axis_from_moments(n, cov)

    offsets = []
    for left_id, right_id in LANDMARK_PAIRS.values():
        ml = index.centroid(left_id)
        mr = index.centroid(right_id)
        if ml is not None and mr is not None:
            offsets.append(ml - mr)
    if not offsets:
        raise ValueError(
            "no complete left/right landmark pair (hips, clavicles, or scapulae)")
    lr = np.mean(offsets, axis=0)
    lr = lr - (lr @ superior) * superior
    norm = np.linalg.norm(lr)
    if norm < 1e-9:
        raise ValueError("left-right landmark offset is parallel to the superior axis")
    lr = lr / norm
    anterior = np.cross(superior, lr)
    return Basis(superior=superior, left_right=lr, anterior=anterior, origin=mean)


def estimate_ras_basis(body: LabelMap, structures: LabelMap) -> Basis:
    """Estimate the patient frame from the body mask and paired landmarks."""
    if body.grid != structures.grid:
        raise ValueError("body and structure maps must share a grid")
    index = _LabelIndex(structures)
    body_moments = _mask_moments(body.body_mask(), _coords_for(body.grid))
    return _basis_from(index, body_moments)


def _pelvis_offset(index: _LabelIndex, superior: np.ndarray) -> float:
    best = None
    for femur_id in (23, 24):
        coords = index.world_coords(femur_id)
        if len(coords):
            top = float((coords @ superior).max())
            best = top if best is None else max(best, top)
    if best is None:
        raise ValueError("no femur voxels (labels 23/24)")
    return best


def pelvis_plane(structures: LabelMap, basis: Basis) -> Plane:
    """Plane normal to superior through the superior-most femur voxel."""
    offset = _pelvis_offset(_LabelIndex(structures), basis.superior)
    return Plane(normal=basis.superior, offset=offset)


def _largest_component(mask: np.ndarray) -> np.ndarray:
    """Largest 26-connected component of a boolean mask."""
    labels, count = ndimage.label(mask, structure=np.ones((3, 3, 3), dtype=bool))
    if count <= 1:
        return mask
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    return labels == int(np.argmax(sizes))


def _inside(body_mask: np.ndarray, grid: Grid, p: np.ndarray) -> bool:
    idx = np.rint((p - np.asarray(grid.origin_mm)) / np.asarray(grid.spacing_mm)).astype(int)
    if (idx < 0).any() or (idx >= np.asarray(grid.dims)).any():
        return False
    return bool(body_mask[idx[0], idx[1], idx[2]])


def _ray_exit(body_mask: np.ndarray, grid: Grid, start: np.ndarray,
              direction: np.ndarray) -> np.ndarray:
    """Last in-body point marching from start along direction.

    Step is half the smallest spacing.  The march may take a short lead-in
    before entering the body; never entering, or never leaving the grid or
    body, is a degenerate-geometry error.
    """
    direction = direction / np.linalg.norm(direction)
    step = 0.5 * min(grid.spacing_mm)
    extent = [grid.dims[a] * grid.spacing_mm[a] for a in range(3)]
    max_steps = int(2 * math.ceil(math.sqrt(sum(e * e for e in extent)) / step)) + 4
    lead_in = int(math.ceil(4.0 * max(grid.spacing_mm) / step))
    last_inside = None
    entered = False
    for i in range(max_steps):
        p = start + i * step * direction
        if _inside(body_mask, grid, p):
            entered = True
            last_inside = p
        elif entered:
            return last_inside
        elif i > lead_in:
            raise ValueError("ray march never entered the body mask")
    raise ValueError("ray march found no exit from the body mask")


def _leg_length(index: _LabelIndex, body_mask: np.ndarray, basis: Basis,
                side: str, pelvis_offset: float) -> LegLength:
    femur_id, tibia_id = (23, 25) if side == "left" else (24, 26)
    if not index.present(femur_id):
        raise ValueError(f"no voxels with label {femur_id} (femur_{side})")
    if not index.present(tibia_id):
        raise ValueError(f"no voxels with label {tibia_id} (tibia_{side})")
    s = basis.superior
    grid = index.grid

    femur_min = float((index.world_coords(femur_id) @ s).min())

    # knee: drop tibia voxels superior to the femur's inferior point, then
    # keep the largest 26-connected component
    sub, sl = index.mask(tibia_id)
    cx, cy, cz = _coords_for(grid, sl)
    heights = (cx[:, None, None] * s[0] + cy[None, :, None] * s[1]
               + cz[None, None, :] * s[2])
    keep = sub & (heights <= femur_min)
    if not keep.any():
        raise ValueError(f"tibia_{side} lies entirely above the femur's inferior point")
    keep = _largest_component(keep)
    n_t, mean_t, cov_t = _mask_moments(keep, (cx, cy, cz))
    knee_offset = float(heights[keep].max())

    n_f, _, cov_f = index.moments(femur_id)
    femur_axis = _principal_axis_from_moments(n_f, cov_f)
    if femur_axis @ s < 0:
        femur_axis = -femur_axis
    cos_f = float(femur_axis @ s)
    if abs(cos_f) < 1e-9:
        raise ValueError("femur axis is perpendicular to the superior direction")
    upper = (pelvis_offset - knee_offset) / cos_f

    tibia_axis = _principal_axis_from_moments(n_t, cov_t)
    if tibia_axis @ s > 0:
        tibia_axis = -tibia_axis  # point toward the foot
    cos_t = float(tibia_axis @ s)
    if abs(cos_t) < 1e-9:
        raise ValueError("tibia axis is perpendicular to the superior direction")
    t_start = (knee_offset - float(mean_t @ s)) / cos_t
    start = mean_t + t_start * tibia_axis
    exit_point = _ray_exit(body_mask, grid, start, tibia_axis)
    lower = float(np.linalg.norm(exit_point - start))
    return LegLength(upper_mm=float(upper), lower_mm=lower)


def leg_length_mm(side: str, structures: LabelMap, body: LabelMap,
                  basis: Basis) -> LegLength:
    """Upper and lower leg length along the bone axes for one side."""
    if side not in ("left", "right"):
        raise ValueError("side must be 'left' or 'right'")
    if body.grid != structures.grid:
        raise ValueError("body and structure maps must share a grid")
    index = _LabelIndex(structures)
    pelvis = _pelvis_offset(index, basis.superior)
    return _leg_length(index, body.body_mask(), basis, side, pelvis)


def measure_height(body: LabelMap, structures: LabelMap) -> HeightBreakdown:
    """Segmentwise standing-height estimate; total is the exact sum."""
    if body.grid != structures.grid:
        raise ValueError("body and structure maps must share a grid")
    index = _LabelIndex(structures)
    for required, name in ((20, "c1"), (21, "c2"), (22, "c7")):
        if not index.present(required):
            raise ValueError(f"missing landmark {required} ({name})")
    body_mask = body.body_mask()
    body_moments = _mask_moments(body_mask, _coords_for(body.grid))
    basis = _basis_from(index, body_moments)
    s = basis.superior
    pelvis = _pelvis_offset(index, s)

    per_leg: dict[str, float | None] = {"left_mm": None, "right_mm": None}
    totals = []
    for side in ("left", "right"):
        femur_id, tibia_id = (23, 25) if side == "left" else (24, 26)
        if index.present(femur_id) and index.present(tibia_id):
            leg = _leg_length(index, body_mask, basis, side, pelvis)
            per_leg[f"{side}_mm"] = leg.total_mm
            totals.append(leg.total_mm)
    if not totals:
        raise ValueError("no complete leg (femur + tibia) on either side")
    lower_body = max(totals)

    c7 = index.centroid(22)
    torso = float(c7 @ s) - pelvis

    c1 = index.centroid(20)
    c2 = index.centroid(21)
    neck = float(np.linalg.norm(c7 - c1))

    head_dir = c1 - c2
    norm = np.linalg.norm(head_dir)
    if norm < 1e-9:
        raise ValueError("C1 and C2 centroids coincide; head direction undefined")
    crown = _ray_exit(body_mask, body.grid, c1, head_dir / norm)
    head = float(np.linalg.norm(crown - c1))

    total = lower_body + torso + neck + head
    return HeightBreakdown(
        lower_body_mm=lower_body, torso_mm=torso, neck_mm=neck, head_mm=head,
        total_mm=total, per_leg=per_leg)
