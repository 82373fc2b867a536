"""Anatomy agreement metrics: Dice, relative centroids, cohort consistency.

Cohort-level distribution agreement uses Q-Q correlation: per structure
class, sort each cohort's values, take ``min(n1, n2)`` evenly spaced
quantiles of each, and report the Pearson correlation between the two
quantile vectors.  This measures whether the two distributions agree up to
the identity line, and is invariant to affine rescaling of either sample.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np

from .stats import pearson
from .volume import LabelMap, STRUCTURE_CLASSES, voxel_volume_mm3

CONSISTENCY_MIN_SAMPLES = 3


def dice(a: LabelMap, b: LabelMap, label: int) -> float:
    """Dice overlap of one class: 2|A n B| / (|A| + |B|); both empty -> 1."""
    if a.grid != b.grid:
        raise ValueError("dice requires label maps on the same grid")
    ma = a.mask(label)
    mb = b.mask(label)
    na = int(ma.sum())
    nb = int(mb.sum())
    if na + nb == 0:
        return 1.0
    inter = int(np.logical_and(ma, mb).sum())
    return 2.0 * inter / (na + nb)


def per_class_dice(a: LabelMap, b: LabelMap) -> dict[int, float]:
    """Dice per class over the union of classes present in either map."""
    if a.grid != b.grid:
        raise ValueError("dice requires label maps on the same grid")
    present = set(np.unique(a.data).tolist()) | set(np.unique(b.data).tolist())
    present.discard(0)
    return {int(c): dice(a, b, int(c)) for c in sorted(present)}


def relative_centroids(structures: LabelMap, body: LabelMap) -> dict[int, tuple[float, float, float]]:
    """Per-class centroid normalized to the body bounding box, in [0,1]^3.

    Axis order follows the RAS world frame.  A degenerate (flat) body axis
    maps to coordinate 0.5.
    """
    if structures.grid != body.grid:
        raise ValueError("structure and body maps must share a grid")
    body_mask = body.body_mask()
    if not body_mask.any():
        raise ValueError("degenerate input: body mask is empty")
    idx = np.nonzero(body_mask)
    spacing = np.asarray(structures.grid.spacing_mm)
    origin = np.asarray(structures.grid.origin_mm)
    lo = np.array([i.min() for i in idx], dtype=np.float64) * spacing + origin
    hi = np.array([i.max() for i in idx], dtype=np.float64) * spacing + origin
    span = hi - lo
    out: dict[int, tuple[float, float, float]] = {}
    for c in sorted(int(v) for v in np.unique(structures.data) if v != 0):
        cidx = np.nonzero(structures.data == c)
        centroid = np.array([i.mean() for i in cidx]) * spacing + origin
        rel = np.where(span > 0, (centroid - lo) / np.where(span > 0, span, 1.0), 0.5)
        out[c] = (float(rel[0]), float(rel[1]), float(rel[2]))
    return out


def collect_structure_measurements(structures: LabelMap, body: LabelMap) -> dict[int, dict]:
    """Per-class volume (mm^3) and relative centroid for one subject."""
    vox = voxel_volume_mm3(structures.grid)
    centroids = relative_centroids(structures, body)
    counts = np.bincount(structures.data.ravel())
    out = {}
    for c, cent in centroids.items():
        out[c] = {"volume_mm3": float(counts[c] * vox), "centroid": cent}
    return out


@dataclass
class CohortMeasurements:
    """Per-class value lists accumulated across one cohort."""

    volumes: dict[int, list[float]] = field(default_factory=dict)
    centroids: dict[int, list[tuple[float, float, float]]] = field(default_factory=dict)

    def add_subject(self, per_class: dict[int, dict]):
        for c, vals in per_class.items():
            self.volumes.setdefault(c, []).append(vals["volume_mm3"])
            self.centroids.setdefault(c, []).append(tuple(vals["centroid"]))


def qq_pearson(a, b) -> float:
    """Pearson correlation of matched quantile vectors of two samples."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    k = min(len(a), len(b))
    if k < 2:
        raise ValueError("Q-Q correlation needs at least two samples per side")
    q = np.linspace(0.0, 1.0, k)
    qa, qb = np.quantile(a, q), np.quantile(b, q)
    if np.array_equal(qa, qb):
        return 1.0  # exactly on y = x; Pearson is 0/0 when also constant
    return pearson(qa, qb)


@dataclass
class ConsistencyRow:
    class_id: int
    class_name: str
    dice_mean: float | None = None
    dice_std: float | None = None
    volume_corr: float | None = None
    centroid_r: float | None = None
    centroid_a: float | None = None
    centroid_s: float | None = None


@dataclass
class ConsistencyTable:
    rows: dict[int, ConsistencyRow] = field(default_factory=dict)

    _COLUMNS = ("dice_mean", "dice_std", "volume_corr",
                "centroid_r", "centroid_a", "centroid_s")

    def average_row(self) -> ConsistencyRow:
        avg = ConsistencyRow(class_id=0, class_name="Average")
        for col in self._COLUMNS:
            vals = [getattr(r, col) for r in self.rows.values() if getattr(r, col) is not None]
            if vals:
                setattr(avg, col, float(np.mean(vals)))
        return avg

    def write_csv(self, path):
        header = ["class", "dice_mean", "dice_std", "volume_corr",
                  "centroid_R", "centroid_A", "centroid_S"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for c in sorted(self.rows):
                r = self.rows[c]
                writer.writerow([r.class_name] + [
                    "" if getattr(r, col) is None else repr(getattr(r, col))
                    for col in self._COLUMNS])
            avg = self.average_row()
            writer.writerow([avg.class_name] + [
                "" if getattr(avg, col) is None else repr(getattr(avg, col))
                for col in self._COLUMNS])


def _class_name(c: int) -> str:
    return STRUCTURE_CLASSES.get(c, f"class_{c}")


def paired_dice_stats(pairs) -> dict[int, tuple[float, float]]:
    """Mean and std of per-class Dice over paired (a, b) label maps."""
    samples: dict[int, list[float]] = {}
    for a, b in pairs:
        for c, d in per_class_dice(a, b).items():
            samples.setdefault(c, []).append(d)
    out = {}
    for c, vals in samples.items():
        arr = np.asarray(vals, dtype=np.float64)
        sd = float(arr.std(ddof=1)) if len(arr) >= 2 else 0.0
        out[c] = (float(arr.mean()), sd)
    return out


def cohort_consistency(a: CohortMeasurements, b: CohortMeasurements,
                       dice_stats: dict[int, tuple[float, float]] | None = None,
                       min_samples: int = CONSISTENCY_MIN_SAMPLES) -> ConsistencyTable:
    """Cross-cohort Q-Q agreement per structure class.

    Classes with fewer than ``min_samples`` subjects in either cohort are
    omitted with a warning.  ``dice_stats`` (from paired comparisons) is
    merged into the table when available.
    """
    table = ConsistencyTable()
    classes = sorted(set(a.volumes) & set(b.volumes))
    for c in classes:
        va, vb = a.volumes[c], b.volumes[c]
        if len(va) < min_samples or len(vb) < min_samples:
            warnings.warn(
                f"class {c} ({_class_name(c)}) has fewer than {min_samples} "
                "samples in a cohort; omitted from consistency table")
            continue
        row = ConsistencyRow(class_id=c, class_name=_class_name(c))
        try:
            row.volume_corr = qq_pearson(va, vb)
        except ValueError:
            row.volume_corr = None
        ca = np.asarray(a.centroids[c], dtype=np.float64)
        cb = np.asarray(b.centroids[c], dtype=np.float64)
        for axis, col in enumerate(("centroid_r", "centroid_a", "centroid_s")):
            try:
                setattr(row, col, qq_pearson(ca[:, axis], cb[:, axis]))
            except ValueError:
                setattr(row, col, None)
        table.rows[c] = row
    if dice_stats:
        for c, (dm, ds) in dice_stats.items():
            if c in table.rows:
                table.rows[c].dice_mean = dm
                table.rows[c].dice_std = ds
    return table
