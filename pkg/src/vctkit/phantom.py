"""Procedural body phantoms with voxel-exact ground truth.

A phantom is assembled from analytic primitives along the superior axis:
leg cylinders (bone core, muscle, fat sheath), a superellipsoid torso
(fat shell, muscle wall, organ-bearing interior), a muscular neck, and a
spherical head with a brain.  Landmark spheres mark C1/C2/C7 and the paired
hips, clavicles, and scapulae; femur/tibia cylinders carry their own labels.
Shell thicknesses are solved analytically so the phantom hits the requested
weight (within 2% at fine spacing) and fat/muscle mass fractions; ground
truth is then recomputed by exact voxel counting on the rasterized arrays,
so it reflects what is actually in the files, not the continuous model.

Anatomy is deliberately simple and sex-independent (all 16 structure
classes are always present); subject attributes shape the phantom only
through size, composition, and bone density.  Realism is a non-goal;
verifiability is the point.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream, subject_seed
from .volume import (
    Grid,
    LabelMap,
    STRUCTURE_TABLE,
    TISSUE_CLASSES,
    Volume,
    voxel_volume_mm3,
)

# fixed HU per material (hu_rho = 0 implies density = (HU + 1000) / 1000)
HU_AIR = -1000
HU_LUNG = -700
HU_FAT = -100
HU_BODY = 30
HU_ORGAN = 40
HU_AORTA = 45
HU_MUSCLE = 50

RHO_FAT = 0.9
RHO_BODY = 1.03
RHO_ORGAN = 1.04
RHO_AORTA = 1.045
RHO_LUNG = 0.3
RHO_MUSCLE = 1.05

TISSUE_BODY, TISSUE_FAT, TISSUE_MUSCLE, TISSUE_BONE = 1, 2, 3, 4


def bone_hu_for_age(age_years: float) -> int:
    """Cortical HU declines with age: 1100 - 5 * age, clamped to [400, 1200]."""
    return int(min(1200.0, max(400.0, 1100.0 - 5.0 * age_years)))


class InfeasibleSpecError(ValueError):
    """The requested size/composition cannot be realized geometrically."""


@dataclass(frozen=True)
class PhantomSpec:
    sex: str = "M"
    age_years: float = 55.0
    height_cm: float = 175.0
    weight_kg: float = 80.0
    fat_fraction: float = 0.25
    muscle_fraction: float = 0.40
    spacing_mm: tuple[float, float, float] = (2.0, 2.0, 2.0)
    seed: int = 0

    def __post_init__(self):
        if self.sex not in ("M", "F"):
            raise ValueError(f"sex must be 'M' or 'F', got {self.sex!r}")
        if not 0.0 <= self.age_years <= 120.0:
            raise ValueError(f"age_years out of range: {self.age_years}")
        if not 80.0 <= self.height_cm <= 220.0:
            raise ValueError(f"height_cm must lie in [80, 220], got {self.height_cm}")
        if not 20.0 <= self.weight_kg <= 200.0:
            raise ValueError(f"weight_kg must lie in [20, 200], got {self.weight_kg}")
        if not 0.05 <= self.fat_fraction <= 0.6:
            raise ValueError(f"fat_fraction must lie in [0.05, 0.6], got {self.fat_fraction}")
        if self.muscle_fraction <= 0.0:
            raise ValueError("muscle_fraction must be positive")
        if self.fat_fraction + self.muscle_fraction > 0.9:
            raise ValueError("fat_fraction + muscle_fraction must not exceed 0.9")
        if len(self.spacing_mm) != 3 or any(not 0.4 <= s <= 8.0 for s in self.spacing_mm):
            raise ValueError(f"spacing_mm components must lie in [0.4, 8], got {self.spacing_mm}")
        object.__setattr__(self, "spacing_mm", tuple(float(s) for s in self.spacing_mm))


@dataclass(frozen=True)
class PhantomTruth:
    body_mass_g: float
    fat_pct: float
    muscle_pct: float
    bone_density_hu: float
    body_volume_mm3: float
    height_breakdown: dict
    landmarks: dict

    def to_dict(self) -> dict:
        return {
            "body_mass_g": self.body_mass_g,
            "fat_pct": self.fat_pct,
            "muscle_pct": self.muscle_pct,
            "bone_density_hu": self.bone_density_hu,
            "body_volume_mm3": self.body_volume_mm3,
            "height_breakdown": dict(self.height_breakdown),
            "landmarks": {k: list(v) for k, v in self.landmarks.items()},
        }

    @staticmethod
    def from_dict(d: dict) -> "PhantomTruth":
        return PhantomTruth(
            body_mass_g=d["body_mass_g"],
            fat_pct=d["fat_pct"],
            muscle_pct=d["muscle_pct"],
            bone_density_hu=d["bone_density_hu"],
            body_volume_mm3=d["body_volume_mm3"],
            height_breakdown=dict(d["height_breakdown"]),
            landmarks={k: tuple(v) for k, v in d["landmarks"].items()},
        )


# organ blobs: (structure_id, hu, tissue, center (fx, fy, fu), semi (ax, ay, au),
# mirrored).  fx/fy/ax/ay are fractions of the interior semi-axes; fu/au are
# fractions of the torso half-length.  Mirrored entries appear at +/- fx.
_ORGANS = (
    (4, HU_ORGAN, TISSUE_BODY, (0.45, 0.10, 0.05), (0.42, 0.55, 0.16), False),   # liver
    (2, HU_ORGAN, TISSUE_BODY, (-0.55, -0.15, 0.10), (0.25, 0.35, 0.10), False),  # spleen
    (3, HU_ORGAN, TISSUE_BODY, (0.42, -0.45, -0.12), (0.18, 0.22, 0.10), True),   # kidneys
    (5, HU_LUNG, TISSUE_BODY, (0.42, 0.05, 0.62), (0.38, 0.55, 0.14), True),      # lung upper
    (6, HU_LUNG, TISSUE_BODY, (0.45, -0.05, 0.36), (0.38, 0.50, 0.11), True),     # lung lower
    (7, HU_LUNG, TISSUE_BODY, (0.48, 0.30, 0.49), (0.22, 0.28, 0.06), False),     # lung middle
    (8, HU_ORGAN, TISSUE_BODY, (0.0, 0.15, -0.72), (0.22, 0.25, 0.08), False),    # bladder
    (9, HU_ORGAN, TISSUE_BODY, (0.0, 0.10, -0.86), (0.10, 0.10, 0.035), False),   # prostate
    (10, HU_ORGAN, TISSUE_BODY, (-0.10, 0.25, 0.42), (0.28, 0.32, 0.10), False),  # heart
    (12, HU_MUSCLE, TISSUE_MUSCLE, (0.35, -0.55, -0.80), (0.28, 0.28, 0.09), True),
    (13, HU_MUSCLE, TISSUE_MUSCLE, (0.14, -0.55, -0.05), (0.10, 0.16, 0.72), True),
    (14, HU_MUSCLE, TISSUE_MUSCLE, (0.22, -0.10, -0.60), (0.13, 0.15, 0.22), True),
)

_AORTA = (11, HU_AORTA, TISSUE_BODY, (-0.06, -0.12, 0.18), (0.055, 0.055, 0.42))

_JITTER_CENTER = 0.04   # relative organ center jitter
_JITTER_SIZE = 0.06     # relative organ size jitter


@dataclass
class _Geometry:
    """Solved continuous geometry of one phantom (world mm, feet at z=0)."""

    H: float
    s: float
    z_pelvis: float
    z_knee: float
    z_ankle: float
    z_c7: float
    z_c1: float
    z_c2: float
    r_head: float
    head_center_z: float
    r_neck: float
    neck_top: float
    R: float
    ry: float
    rz: float
    zc: float
    hip_x: float
    r_leg: float
    q_fat: float
    q_muscle: float
    r_femur: float
    r_tibia: float
    r_spine: float
    r_stub: float
    r_marker: float
    bone_hu: int


def _torso_volume(R: float, ry: float, rz: float) -> float:
    # superellipsoid with z-profile w(u) = 1 - u^6: integral gives 12/7
    return (12.0 / 7.0) * math.pi * R * ry * rz


def _organ_volumes(qm: float, R: float, ry: float, rz: float) -> dict:
    """Analytic organ volumes (mm^3) keyed by density class."""
    rx_i = 0.82 * math.sqrt(max(qm, 0.0)) * R
    ry_i = 0.82 * math.sqrt(max(qm, 0.0)) * ry
    vols = {"lung": 0.0, "organ": 0.0, "muscle": 0.0}
    for _sid, hu, tissue, _c, (ax, ay, au), mirrored in _ORGANS:
        v = (4.0 / 3.0) * math.pi * (ax * rx_i) * (ay * ry_i) * (au * rz)
        v *= 2.0 if mirrored else 1.0
        if hu == HU_LUNG:
            vols["lung"] += v
        elif tissue == TISSUE_MUSCLE:
            vols["muscle"] += v
        else:
            vols["organ"] += v
    _sid, _hu, _t, _c, (ax, ay, au) = _AORTA
    vols["organ"] += math.pi * (ax * rx_i) * (ay * ry_i) * (2.0 * au * rz)
    return vols


def _solve_geometry(spec: PhantomSpec) -> _Geometry:
    H = spec.height_cm * 10.0
    s = H / 1750.0
    z_pelvis = 0.47 * H
    z_knee = 0.26 * H
    z_ankle = 0.03 * H
    z_c7 = 0.79 * H
    z_c1 = 0.865 * H
    z_c2 = z_c1 - max(20.0, 0.018 * H)
    r_head = (H - z_c1) / 1.95
    head_center_z = H - r_head
    head_bottom = H - 2.0 * r_head
    r_neck = 42.0 * s
    neck_top = head_bottom + 5.0

    r_femur = 14.0 * s
    r_tibia = 12.0 * s
    r_spine = 17.0 * s
    r_stub = 9.0 * s
    r_marker = max(7.0 * s, max(spec.spacing_mm))
    bone_hu = bone_hu_for_age(spec.age_years)
    rho_bone = (bone_hu + 1000.0) / 1000.0

    L_T = z_c7 - z_pelvis
    rz = L_T / 2.0
    zc = (z_pelvis + z_c7) / 2.0

    total_g = spec.weight_kg * 1000.0
    v_fat = 1000.0 * spec.fat_fraction * total_g / RHO_FAT
    v_muscle = 1000.0 * spec.muscle_fraction * total_g / RHO_MUSCLE

    v_femur = 2.0 * math.pi * r_femur**2 * (z_pelvis - z_knee)
    v_tibia = 2.0 * math.pi * r_tibia**2 * ((z_knee - 3.0) - z_ankle)
    v_stub = 2.0 * math.pi * r_stub**2 * (z_ankle - 10.0)
    v_legbones = v_femur + v_tibia + v_stub
    v_markers = 13.0 * (4.0 / 3.0) * math.pi * r_marker**3
    v_head = (4.0 / 3.0) * math.pi * r_head**3
    v_brain = (4.0 / 3.0) * math.pi * (0.60 * r_head) ** 3
    v_neck = math.pi * r_neck**2 * (neck_top - z_c7)

    def model(R: float):
        ry = 0.62 * R
        r_leg = 0.34 * R
        v_torso = _torso_volume(R, ry, rz)
        v_legs = 2.0 * math.pi * r_leg**2 * z_pelvis
        v_spine = math.pi * r_spine**2 * ((z_c7 - 0.03 * L_T) - (z_pelvis + 0.08 * L_T))
        q_fat = 1.0 - v_fat / (v_torso + v_legs)
        # muscle balance: torso wall + leg cores - embedded bones + neck +
        # muscle organs (fraction of the interior) = target muscle volume
        organ_unit = _organ_volumes(1.0, R, ry, rz)  # at qm = 1 for scaling
        kappa_mu = organ_unit["muscle"] / v_torso
        q_muscle = (q_fat * (v_torso + v_legs) - v_muscle - v_legbones + v_neck) / (
            v_torso * (1.0 - kappa_mu))
        organs = _organ_volumes(q_muscle, R, ry, rz)
        v_interior = q_muscle * v_torso
        v_int_body = v_interior - organs["lung"] - organs["organ"] - organs["muscle"] - v_spine
        mass_g = (
            RHO_FAT * v_fat
            + RHO_MUSCLE * v_muscle
            + rho_bone * (v_legbones + v_spine + v_markers)
            + RHO_BODY * (v_head - v_brain)
            + RHO_ORGAN * v_brain
            + RHO_BODY * v_int_body
            + RHO_ORGAN * organs["organ"]
            + RHO_LUNG * organs["lung"]
        ) / 1000.0
        return mass_g, q_fat, q_muscle, r_leg, ry

    lo, hi = 40.0, 450.0
    m_lo = model(lo)[0]
    m_hi = model(hi)[0]
    if not m_lo < total_g < m_hi:
        raise InfeasibleSpecError(
            f"no torso radius in [{lo}, {hi}] mm realizes {spec.weight_kg} kg")
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if model(mid)[0] < total_g:
            lo = mid
        else:
            hi = mid
    R = 0.5 * (lo + hi)
    _, q_fat, q_muscle, r_leg, ry = model(R)

    if q_fat <= 0.0:
        raise InfeasibleSpecError("fat_fraction exceeds the available soft volume")
    if q_muscle <= 0.05:
        raise InfeasibleSpecError("fat + muscle leave no room for the torso interior")
    if q_muscle >= q_fat:
        raise InfeasibleSpecError("muscle_fraction exceeds the available shell volume")
    core_r = r_leg * math.sqrt(q_fat)
    if core_r < r_femur + 1.5 * max(spec.spacing_mm):
        raise InfeasibleSpecError("leg muscle core too thin to hold the femur")

    return _Geometry(
        H=H, s=s, z_pelvis=z_pelvis, z_knee=z_knee, z_ankle=z_ankle,
        z_c7=z_c7, z_c1=z_c1, z_c2=z_c2, r_head=r_head,
        head_center_z=head_center_z, r_neck=r_neck, neck_top=neck_top,
        R=R, ry=ry, rz=rz, zc=zc, hip_x=0.40 * R, r_leg=r_leg,
        q_fat=q_fat, q_muscle=q_muscle, r_femur=r_femur, r_tibia=r_tibia,
        r_spine=r_spine, r_stub=r_stub, r_marker=r_marker, bone_hu=bone_hu,
    )


class _Canvas:
    """Paint target: HU, tissue, and structure arrays plus world coords."""

    def __init__(self, grid: Grid):
        self.grid = grid
        self.hu = np.full(grid.dims, HU_AIR, dtype=np.int16)
        self.tissue = np.zeros(grid.dims, dtype=np.uint8)
        self.structure = np.zeros(grid.dims, dtype=np.uint8)
        self.x = grid.axis_coords(0)
        self.y = grid.axis_coords(1)
        self.z = grid.axis_coords(2)

    def _slab(self, lo: np.ndarray, hi: np.ndarray):
        coords = (self.x, self.y, self.z)
        sl = []
        for a in range(3):
            i0 = int(np.searchsorted(coords[a], lo[a], side="left"))
            i1 = int(np.searchsorted(coords[a], hi[a], side="right"))
            if i0 >= i1:
                return None
            sl.append(slice(i0, i1))
        return tuple(sl)

    def slab_arrays(self, lo, hi):
        """(slices, X, Y, Z) broadcastable world coords for a box, or None.

        Coordinates are float32: the rasterized surface is the definition of
        the phantom, so only self-consistency matters, not float64 rounding.
        """
        sl = self._slab(np.asarray(lo, dtype=float), np.asarray(hi, dtype=float))
        if sl is None:
            return None
        X = self.x[sl[0]].astype(np.float32)[:, None, None]
        Y = self.y[sl[1]].astype(np.float32)[None, :, None]
        Z = self.z[sl[2]].astype(np.float32)[None, None, :]
        return sl, X, Y, Z

    def assign(self, sl, mask, hu: int, tissue: int, structure: int | None = None):
        self.hu[sl][mask] = hu
        self.tissue[sl][mask] = tissue
        if structure is not None:
            self.structure[sl][mask] = structure

    def paint(self, mask_fn, lo, hi, hu: int, tissue: int, structure: int | None):
        got = self.slab_arrays(lo, hi)
        if got is None:
            return
        sl, X, Y, Z = got
        shape = (X.shape[0], Y.shape[1], Z.shape[2])
        mask = np.broadcast_to(mask_fn(X, Y, Z), shape)
        if not mask.any():
            return
        self.assign(sl, mask, hu, tissue, structure)

    def paint_ellipsoid(self, center, radii, hu, tissue, structure=None):
        c = np.asarray(center, dtype=float)
        r = np.asarray(radii, dtype=float)
        self.paint(
            lambda X, Y, Z: ((X - c[0]) / r[0]) ** 2 + ((Y - c[1]) / r[1]) ** 2
            + ((Z - c[2]) / r[2]) ** 2 <= 1.0,
            c - r, c + r, hu, tissue, structure)

    def paint_sphere(self, center, radius, hu, tissue, structure=None):
        self.paint_ellipsoid(center, (radius, radius, radius), hu, tissue, structure)

    def paint_zcylinder(self, cx, cy, radius, z0, z1, hu, tissue, structure=None):
        self.paint(
            lambda X, Y, Z: (((X - cx) / radius) ** 2 + ((Y - cy) / radius) ** 2 <= 1.0)
            & (Z >= z0) & (Z <= z1),
            (cx - radius, cy - radius, z0), (cx + radius, cy + radius, z1),
            hu, tissue, structure)


def _grid_for(geom: _Geometry, spacing) -> tuple[Grid, np.ndarray]:
    margin = 3.0 * max(spacing)
    half_x = max(geom.R, geom.hip_x + geom.r_leg, geom.r_head) + margin
    half_y = max(geom.ry, geom.r_leg, geom.r_head) + margin
    z_len = geom.H + 2.0 * margin
    dims = (
        int(math.ceil(2.0 * half_x / spacing[0])),
        int(math.ceil(2.0 * half_y / spacing[1])),
        int(math.ceil(z_len / spacing[2])),
    )
    grid = Grid(dims, tuple(spacing))
    # body center sits mid-grid in x/y; feet at z = margin
    center = np.array([
        (dims[0] - 1) * spacing[0] / 2.0,
        (dims[1] - 1) * spacing[1] / 2.0,
        margin,
    ])
    return grid, center


def generate_phantom(spec: PhantomSpec):
    """Rasterize one phantom.

    Returns ``(volume, tissue_map, structure_map, truth)``.  The seed
    perturbs organ positions and sizes slightly so cohorts carry anatomical
    variation beyond pure scaling.
    """
    geom = _solve_geometry(spec)
    grid, offset = _grid_for(geom, spec.spacing_mm)
    canvas = _Canvas(grid)
    xc, yc, z0 = float(offset[0]), float(offset[1]), float(offset[2])
    jit = Stream(spec.seed)

    rz, zc = geom.rz, z0 + geom.zc
    R, ry = geom.R, geom.ry
    qf, qm = geom.q_fat, geom.q_muscle

    # legs: fat sheath over muscle core (bones painted later); the radial
    # coordinate is computed once, masks are z-uniform
    for sx in (-1.0, 1.0):
        cx = xc + sx * geom.hip_x
        got = canvas.slab_arrays((cx - geom.r_leg, yc - geom.r_leg, z0),
                                 (cx + geom.r_leg, yc + geom.r_leg, z0 + geom.z_pelvis))
        if got is not None:
            sl, X, Y, _Z = got
            q = (((X - cx) ** 2 + (Y - yc) ** 2) / geom.r_leg**2)[:, :, 0]
            canvas.assign(sl, q <= 1.0, HU_FAT, TISSUE_FAT)
            canvas.assign(sl, q <= qf, HU_MUSCLE, TISSUE_MUSCLE)

    # torso: shared z-profile w(u) = 1 - u^6; shells at fractions of w
    got = canvas.slab_arrays((xc - R, yc - ry, z0 + geom.z_pelvis),
                             (xc + R, yc + ry, z0 + geom.z_c7))
    if got is not None:
        sl, X, Y, Z = got
        q = ((X - xc) / R) ** 2 + ((Y - yc) / ry) ** 2
        w = 1.0 - ((Z - zc) / rz) ** 6
        canvas.assign(sl, q <= w, HU_FAT, TISSUE_FAT)
        canvas.assign(sl, q <= qf * w, HU_MUSCLE, TISSUE_MUSCLE)
        canvas.assign(sl, q <= qm * w, HU_BODY, TISSUE_BODY)

    # neck and head
    canvas.paint_zcylinder(xc, yc, geom.r_neck, z0 + geom.z_c7, z0 + geom.neck_top,
                           HU_MUSCLE, TISSUE_MUSCLE)
    canvas.paint_sphere((xc, yc, z0 + geom.head_center_z), geom.r_head,
                        HU_BODY, TISSUE_BODY)

    # organs inside the interior, with seeded jitter
    rx_i = 0.82 * math.sqrt(qm) * R
    ry_i = 0.82 * math.sqrt(qm) * ry
    for sid, hu, tissue, (fx, fy, fu), (ax, ay, au), mirrored in _ORGANS:
        sides = (-1.0, 1.0) if mirrored else (1.0,)
        for side in sides:
            jc = jit.normal(3, 0.0, _JITTER_CENTER)
            js = 1.0 + jit.normal(3, 0.0, _JITTER_SIZE)
            js = np.clip(js, 0.8, 1.2)
            center = (
                xc + (side * fx + jc[0]) * rx_i,
                yc + (fy + jc[1]) * ry_i,
                zc + (fu + 0.5 * jc[2] * au) * rz,
            )
            radii = (max(ax * js[0], 0.02) * rx_i,
                     max(ay * js[1], 0.02) * ry_i,
                     max(au * js[2], 0.01) * rz)
            canvas.paint_ellipsoid(center, radii, hu, tissue, sid)
    sid, hu, tissue, (fx, fy, fu), (ax, ay, au) = _AORTA
    canvas.paint_zcylinder(xc + fx * rx_i, yc + fy * ry_i, ax * rx_i,
                           zc + (fu - au) * rz, zc + (fu + au) * rz,
                           hu, tissue, sid)

    # brain
    canvas.paint_sphere((xc, yc, z0 + geom.head_center_z + 0.1 * geom.r_head),
                        0.60 * geom.r_head, HU_ORGAN, TISSUE_BODY, 15)

    bone_hu = geom.bone_hu
    L_T = geom.z_c7 - geom.z_pelvis
    # spine (structure 1 = merged bone class)
    canvas.paint_zcylinder(xc, yc - 0.30 * ry_i, geom.r_spine,
                           z0 + geom.z_pelvis + 0.08 * L_T,
                           z0 + geom.z_c7 - 0.03 * L_T,
                           bone_hu, TISSUE_BONE, 1)

    # leg long bones and ankle stubs
    for side, femur_id, tibia_id in ((-1.0, 23, 25), (1.0, 24, 26)):
        cx = xc + side * geom.hip_x
        canvas.paint_zcylinder(cx, yc, geom.r_femur, z0 + geom.z_knee,
                               z0 + geom.z_pelvis, bone_hu, TISSUE_BONE, femur_id)
        canvas.paint_zcylinder(cx, yc, geom.r_tibia, z0 + geom.z_ankle,
                               z0 + geom.z_knee - 3.0, bone_hu, TISSUE_BONE, tibia_id)
        canvas.paint_zcylinder(cx, yc, geom.r_stub, z0 + 10.0,
                               z0 + geom.z_ankle, bone_hu, TISSUE_BONE, 16)

    # landmark marker spheres
    landmarks = {
        "c1": (xc, yc, z0 + geom.z_c1),
        "c2": (xc, yc, z0 + geom.z_c2),
        "c7": (xc, yc, z0 + geom.z_c7),
        "hip_left": (xc - 0.60 * R, yc + 0.10 * ry, z0 + geom.z_pelvis + 0.06 * L_T),
        "hip_right": (xc + 0.60 * R, yc + 0.10 * ry, z0 + geom.z_pelvis + 0.06 * L_T),
        "clavicle_left": (xc - 0.55 * R, yc + 0.15 * ry, z0 + geom.z_c7 - 0.06 * L_T),
        "clavicle_right": (xc + 0.55 * R, yc + 0.15 * ry, z0 + geom.z_c7 - 0.06 * L_T),
        "scapula_left": (xc - 0.42 * R, yc - 0.30 * ry, z0 + geom.z_c7 - 0.10 * L_T),
        "scapula_right": (xc + 0.42 * R, yc - 0.30 * ry, z0 + geom.z_c7 - 0.10 * L_T),
    }
    marker_ids = {"c1": 20, "c2": 21, "c7": 22, "hip_left": 27, "hip_right": 28,
                  "clavicle_left": 29, "clavicle_right": 30,
                  "scapula_left": 31, "scapula_right": 32}
    # patient left is -x in RAS (+x points toward patient right)
    for name, pos in landmarks.items():
        canvas.paint_sphere(pos, geom.r_marker, bone_hu, TISSUE_BONE, marker_ids[name])
    landmarks["femur_left"] = (xc - geom.hip_x, yc, z0 + (geom.z_knee + geom.z_pelvis) / 2)
    landmarks["femur_right"] = (xc + geom.hip_x, yc, z0 + (geom.z_knee + geom.z_pelvis) / 2)
    landmarks["tibia_left"] = (xc - geom.hip_x, yc, z0 + (geom.z_ankle + geom.z_knee) / 2)
    landmarks["tibia_right"] = (xc + geom.hip_x, yc, z0 + (geom.z_ankle + geom.z_knee) / 2)

    vol = Volume(grid, canvas.hu, "HU")
    tissue_map = LabelMap(grid, canvas.tissue, "tissue", dict(TISSUE_CLASSES))
    structure_map = LabelMap(grid, canvas.structure, "structure", dict(STRUCTURE_TABLE))
    truth = _count_truth(canvas, grid, geom, landmarks)
    return vol, tissue_map, structure_map, truth


def _count_truth(canvas: _Canvas, grid: Grid, geom: _Geometry,
                 landmarks: dict) -> PhantomTruth:
    """Ground truth by exact voxel counting with the default density map.

    Every material has a distinct fixed HU and air only appears outside the
    body, so one histogram over HU values yields all masses exactly (air
    adjustment included: every in-body HU is above -900).
    """
    vox = voxel_volume_mm3(grid)
    # histogram int16 HU without conversion via the two's-complement view
    counts = np.bincount(canvas.hu.ravel().view(np.uint16), minlength=65536)

    def count_of(h: int) -> int:
        return int(counts[h & 0xFFFF])

    def mass_of(hu_values) -> float:
        return sum(count_of(h) * (h + 1000.0) / 1000.0 for h in hu_values) * vox / 1000.0

    present = [int(i) - 65536 if i > 32767 else int(i)
               for i in np.nonzero(counts)[0] if (int(i) - 65536 if i > 32767 else int(i)) != HU_AIR]
    m_body = mass_of(present)
    m_fat = mass_of([HU_FAT])
    m_muscle = mass_of([HU_MUSCLE])
    n_body = sum(count_of(h) for h in present)
    bone_hu = float(geom.bone_hu) if count_of(geom.bone_hu) > 0 else float("nan")
    breakdown = {
        "lower_body_mm": geom.z_pelvis,
        "torso_mm": geom.z_c7 - geom.z_pelvis,
        "neck_mm": geom.z_c1 - geom.z_c7,
        "head_mm": geom.H - geom.z_c1,
        "total_mm": geom.H,
    }
    return PhantomTruth(
        body_mass_g=m_body,
        fat_pct=100.0 * m_fat / m_body,
        muscle_pct=100.0 * m_muscle / m_body,
        bone_density_hu=bone_hu,
        body_volume_mm3=n_body * vox,
        height_breakdown=breakdown,
        landmarks={k: tuple(float(c) for c in v) for k, v in landmarks.items()},
    )


# --- cohorts ------------------------------------------------------------


@dataclass(frozen=True)
class Attributes:
    """Recorded subject attributes; None marks a missing record."""

    sex: str | None
    age_years: float | None
    height_cm: float | None
    weight_kg: float | None


@dataclass(frozen=True)
class AttributeDistribution:
    """Cohort priors: sex-conditional truncated normals, corr(height, weight)."""

    p_female: float = 0.5
    age_mean: float = 55.0
    age_sd: float = 18.0
    age_range: tuple[float, float] = (18.0, 90.0)
    height_mean: dict = field(default_factory=lambda: {"M": 176.0, "F": 163.0})
    height_sd: dict = field(default_factory=lambda: {"M": 7.5, "F": 7.0})
    height_range: tuple[float, float] = (145.0, 203.0)
    weight_mean: dict = field(default_factory=lambda: {"M": 84.0, "F": 72.0})
    weight_sd: dict = field(default_factory=lambda: {"M": 14.0, "F": 13.0})
    weight_range: tuple[float, float] = (45.0, 135.0)
    height_weight_corr: float = 0.5
    missing_rate: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.p_female <= 1.0:
            raise ValueError("p_female must lie in [0, 1]")
        if not -1.0 < self.height_weight_corr < 1.0:
            raise ValueError("height_weight_corr must lie in (-1, 1)")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ValueError("missing_rate must lie in [0, 1)")


# attribute -> composition model, shared by cohort and matched generation
FAT_BASE = {"M": 0.193, "F": 0.197}
FAT_REF_WEIGHT = 75.0
FAT_WEIGHT_SLOPE = 0.0034        # fat mass fraction per kg
FAT_REF_AGE = 55.0
FAT_AGE_SLOPE = 0.00175           # fat mass fraction per year
FAT_NOISE_SD = 0.004
FAT_RANGE = (0.08, 0.55)
MUSCLE_BASE = {"M": 0.427, "F": 0.423}
MUSCLE_FAT_SLOPE = -0.65
MUSCLE_NOISE_SD = 0.0075
MUSCLE_RANGE = (0.16, 0.54)
FRACTION_SUM_CAP = 0.86
_MAX_DRAWS = 100


def sample_fractions(sex: str, age_years: float, weight_kg: float,
                     stream: Stream) -> tuple[float, float]:
    """Draw fat/muscle mass fractions given sex, age, and weight."""
    fat = (FAT_BASE[sex] + FAT_WEIGHT_SLOPE * (weight_kg - FAT_REF_WEIGHT)
           + FAT_AGE_SLOPE * (age_years - FAT_REF_AGE)
           + stream.normal1(0.0, FAT_NOISE_SD))
    fat = min(max(fat, FAT_RANGE[0]), FAT_RANGE[1])
    muscle = (MUSCLE_BASE[sex] + MUSCLE_FAT_SLOPE * (fat - FAT_BASE[sex])
              + stream.normal1(0.0, MUSCLE_NOISE_SD))
    muscle = min(max(muscle, MUSCLE_RANGE[0]), MUSCLE_RANGE[1])
    if fat + muscle > FRACTION_SUM_CAP:
        muscle = FRACTION_SUM_CAP - fat
    return fat, muscle


def _truncated_normal(stream: Stream, mean: float, sd: float, bounds) -> float:
    for _ in range(_MAX_DRAWS):
        v = stream.normal1(mean, sd)
        if bounds[0] <= v <= bounds[1]:
            return v
    raise ValueError(f"could not draw within {bounds} after {_MAX_DRAWS} tries")


def _sample_height_weight(stream: Stream, dist: AttributeDistribution,
                          sex: str) -> tuple[float, float]:
    rho = dist.height_weight_corr
    for _ in range(_MAX_DRAWS):
        z1 = stream.normal1()
        z2 = stream.normal1()
        h = dist.height_mean[sex] + dist.height_sd[sex] * z1
        w = dist.weight_mean[sex] + dist.weight_sd[sex] * (
            rho * z1 + math.sqrt(1.0 - rho * rho) * z2)
        if (dist.height_range[0] <= h <= dist.height_range[1]
                and dist.weight_range[0] <= w <= dist.weight_range[1]):
            return h, w
    raise ValueError(f"could not draw height/weight after {_MAX_DRAWS} tries")


def sample_subject_spec(stream: Stream, dist: AttributeDistribution,
                        spacing, seed: int) -> tuple[Attributes, PhantomSpec]:
    """Draw one subject: true PhantomSpec plus (possibly censored) record."""
    sex = "F" if stream.uniform1() < dist.p_female else "M"
    age = _truncated_normal(stream, dist.age_mean, dist.age_sd, dist.age_range)
    height, weight = _sample_height_weight(stream, dist, sex)
    fat, muscle = sample_fractions(sex, age, weight, stream)
    spec = PhantomSpec(sex=sex, age_years=age, height_cm=height, weight_kg=weight,
                       fat_fraction=fat, muscle_fraction=muscle,
                       spacing_mm=tuple(spacing), seed=seed)
    values = [sex, age, height, weight]
    if dist.missing_rate > 0.0:
        for i in range(4):
            if stream.uniform1() < dist.missing_rate:
                values[i] = None
    attrs = Attributes(sex=values[0], age_years=values[1],
                       height_cm=values[2], weight_kg=values[3])
    return attrs, spec


def sample_cohort_specs(n: int, dist: AttributeDistribution, spacing,
                        seed: int) -> list[tuple[str, Attributes, PhantomSpec]]:
    """Subject ids, records, and true specs for an n-subject cohort."""
    out = []
    for i in range(n):
        sseed = subject_seed(seed, i)
        stream = Stream(sseed)
        attrs, spec = sample_subject_spec(stream, dist, spacing, sseed)
        out.append((f"subj_{i:04d}", attrs, spec))
    return out


# --- binning ------------------------------------------------------------


@dataclass(frozen=True)
class BinnedAttributes:
    sex: str        # "M" | "F" | "none"
    age: str        # e.g. "50-60" | "none"
    height: str     # cm bin
    weight: str     # kg bin


def _bin_value(v: float | None) -> str:
    if v is None:
        return "none"
    k = max(0, int(math.floor(v / 10.0)))
    return f"{10 * k}-{10 * (k + 1)}"


def bin_attributes(attrs: Attributes) -> BinnedAttributes:
    """Half-open decade/10cm/10kg bins; missing values map to 'none'."""
    return BinnedAttributes(
        sex=attrs.sex if attrs.sex in ("M", "F") else "none",
        age=_bin_value(attrs.age_years),
        height=_bin_value(attrs.height_cm),
        weight=_bin_value(attrs.weight_kg),
    )


def bin_midpoint(bin_label: str) -> float | None:
    if bin_label == "none":
        return None
    lo, hi = bin_label.split("-")
    return (float(lo) + float(hi)) / 2.0


def generate_matched_spec(binned: BinnedAttributes, dist: AttributeDistribution,
                          spacing, seed: int) -> PhantomSpec:
    """Draw a fresh subject consistent with binned attributes.

    Known bins are sampled uniformly within the bin; 'none' falls back to
    the cohort prior.  Composition comes from the same conditional model as
    real cohort generation, so only the attribute-explained part of body
    composition is reproduced.
    """
    stream = Stream(seed)
    if binned.sex in ("M", "F"):
        sex = binned.sex
    else:
        sex = "F" if stream.uniform1() < dist.p_female else "M"

    def draw(bin_label: str, prior_mean, prior_sd, prior_range, clamp):
        if bin_label == "none":
            return _truncated_normal(stream, prior_mean, prior_sd, prior_range)
        lo, hi = (float(p) for p in bin_label.split("-"))
        lo = max(lo, clamp[0])
        hi = min(hi, clamp[1])
        if lo >= hi:
            lo, hi = clamp
        return lo + stream.uniform1() * (hi - lo)

    age = draw(binned.age, dist.age_mean, dist.age_sd, dist.age_range, (0.0, 110.0))
    height = draw(binned.height, dist.height_mean[sex], dist.height_sd[sex],
                  dist.height_range, (100.0, 215.0))
    weight = draw(binned.weight, dist.weight_mean[sex], dist.weight_sd[sex],
                  dist.weight_range, (25.0, 180.0))
    fat, muscle = sample_fractions(sex, age, weight, stream)
    return PhantomSpec(sex=sex, age_years=age, height_cm=height, weight_kg=weight,
                       fat_fraction=fat, muscle_fraction=muscle,
                       spacing_mm=tuple(spacing), seed=seed)


# --- manifests ----------------------------------------------------------


@dataclass
class SubjectRecord:
    subject_id: str
    attributes: Attributes
    population: str = "unsplit"
    image: str | None = None
    tissue: str | None = None
    structure: str | None = None
    truth: PhantomTruth | None = None


@dataclass
class CohortManifest:
    seed: int
    spacing_mm: tuple[float, float, float]
    subjects: list[SubjectRecord] = field(default_factory=list)


def write_manifest(manifest: CohortManifest, path) -> Path:
    payload = {
        "seed": manifest.seed,
        "spacing_mm": list(manifest.spacing_mm),
        "subjects": [
            {
                "id": s.subject_id,
                "image": s.image,
                "tissue": s.tissue,
                "structure": s.structure,
                "population": s.population,
                "attributes": {
                    "sex": s.attributes.sex,
                    "age_years": s.attributes.age_years,
                    "height_cm": s.attributes.height_cm,
                    "weight_kg": s.attributes.weight_kg,
                },
                "truth": s.truth.to_dict() if s.truth is not None else None,
            }
            for s in manifest.subjects
        ],
    }
    p = Path(path)
    p.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return p


def load_manifest(path) -> CohortManifest:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    subjects = []
    for s in payload["subjects"]:
        a = s["attributes"]
        subjects.append(SubjectRecord(
            subject_id=s["id"],
            attributes=Attributes(sex=a["sex"], age_years=a["age_years"],
                                  height_cm=a["height_cm"], weight_kg=a["weight_kg"]),
            population=s.get("population", "unsplit"),
            image=s.get("image"),
            tissue=s.get("tissue"),
            structure=s.get("structure"),
            truth=PhantomTruth.from_dict(s["truth"]) if s.get("truth") else None,
        ))
    return CohortManifest(seed=payload["seed"],
                          spacing_mm=tuple(payload["spacing_mm"]),
                          subjects=subjects)


def generate_cohort(n: int, dist: AttributeDistribution, spacing, seed: int,
                    out_dir, threads: int = 1) -> CohortManifest:
    """Generate n phantoms, write CTV files plus a manifest, return it.

    Generation runs in batches of ``threads`` workers; files are written in
    subject order, so outputs are identical for any thread count and memory
    stays bounded by the batch size.
    """
    from concurrent.futures import ThreadPoolExecutor

    from .io import save_labelmap, save_volume  # deferred: avoids cycle at import

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = CohortManifest(seed=seed, spacing_mm=tuple(float(s) for s in spacing))
    specs = sample_cohort_specs(n, dist, spacing, seed)
    batch = max(1, int(threads))

    def build(item):
        subject_id, attrs, spec = item
        return (subject_id, attrs, *generate_phantom(spec))

    for start in range(0, len(specs), batch):
        chunk = specs[start:start + batch]
        if batch > 1:
            with ThreadPoolExecutor(max_workers=batch) as ex:
                built = list(ex.map(build, chunk))
        else:
            built = [build(item) for item in chunk]
        for subject_id, attrs, vol, tissue, structure, truth in built:
            save_volume(vol, out / f"{subject_id}_image")
            save_labelmap(tissue, out / f"{subject_id}_tissue")
            save_labelmap(structure, out / f"{subject_id}_structure")
            manifest.subjects.append(SubjectRecord(
                subject_id=subject_id,
                attributes=attrs,
                image=f"{subject_id}_image.ctv.json",
                tissue=f"{subject_id}_tissue.ctv.json",
                structure=f"{subject_id}_structure.ctv.json",
                truth=truth,
            ))
    write_manifest(manifest, out / "manifest.json")
    return manifest
