"""Virtual-clinical-trial orchestration.

A trial takes a measured phantom cohort, splits it along a linear decision
boundary in (body volume, tissue percentage) space into a biased train/ID
population and an OOD population, fits a (deliberately shortcut-prone)
predictor on the train split, and then audits the predictor:

* per-population MAE with bootstrap CIs for real, synthetic,
  re-biased-synthetic, and importance-weighted sample types;
* Z-scores and p-values of each sample type against the real errors of the
  same population;
* a bias-attribution block: per-attribute error correlations with a
  Fisher-z cross-type p-value, and random-forest error regressions with
  normalized feature importances compared across sample types.

Synthetic cohorts are regenerated from binned subject attributes with fresh
seeds, so they carry only the attribute-explained part of body composition
-- which is exactly what makes re-biasing by culling necessary, mirroring
the audit this package exists to reproduce.
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .composition import CompositionReport, measure_composition
from .forest import Forest, ForestParams, REGRESSOR_PARAMS, fit_forest, predict, predict_proba
from .phantom import (
    AttributeDistribution,
    Attributes,
    BinnedAttributes,
    bin_attributes,
    bin_midpoint,
    generate_matched_spec,
    generate_phantom,
    sample_cohort_specs,
)
from .rng import Stream, fnv1a64, subject_seed
from .stats import (
    bootstrap_ci,
    importance_weights,
    mae,
    normal_cdf,
    pearson,
    weighted_mae,
    z_score,
    z_test_p,
)

TASKS = ("fat_pct", "muscle_pct")
SAMPLE_TYPES = ("real", "synthetic", "synthetic_rebias", "real_weighted")
FEATURE_NAMES = ("sex", "age", "height", "weight", "fat_pct", "bone_density",
                 "muscle_pct", "body_volume")

VERDICT_ACCEPTABLE_BELOW = 2.0
VERDICT_DEGRADED_ABOVE = 3.0


def verdict_for(mae_value: float) -> str:
    """acceptable below 2, degraded above 3, indeterminate between."""
    if mae_value < VERDICT_ACCEPTABLE_BELOW:
        return "acceptable"
    if mae_value > VERDICT_DEGRADED_ABOVE:
        return "degraded"
    return "indeterminate"


@dataclass(frozen=True)
class BiasBoundary:
    """Line in (x_feature, y_feature) space; id_side picks the half-plane."""

    x_feature: str = "body_volume"
    y_feature: str = "muscle_pct"
    slope: float = -0.2
    intercept: float = 58.3
    id_side: str = "above"

    def __post_init__(self):
        if not (math.isfinite(self.slope) and math.isfinite(self.intercept)):
            raise ValueError("boundary slope/intercept must be finite")
        if self.x_feature not in ("body_volume",):
            raise ValueError(f"unsupported x_feature {self.x_feature!r}")
        if self.y_feature not in ("muscle_pct", "fat_pct"):
            raise ValueError(f"unsupported y_feature {self.y_feature!r}")
        if self.id_side not in ("above", "below"):
            raise ValueError("id_side must be 'above' or 'below'")

    def side(self, report: CompositionReport) -> str:
        x = report_feature(report, self.x_feature)
        y = report_feature(report, self.y_feature)
        above = y > self.slope * x + self.intercept
        if self.id_side == "above":
            return "id" if above else "ood"
        return "ood" if above else "id"


def report_feature(report: CompositionReport, name: str) -> float:
    if name == "body_volume":
        return report.body_volume_l
    if name == "fat_pct":
        return report.fat_pct
    if name == "muscle_pct":
        return report.muscle_pct
    if name == "bone_density":
        if report.bone_density_hu is None:
            return float("nan")
        return report.bone_density_hu
    raise KeyError(f"unknown report feature {name!r}")


@dataclass
class MeasuredSubject:
    """One subject: recorded attributes plus its measured composition."""

    subject_id: str
    attributes: Attributes
    report: CompositionReport
    population: str = "unsplit"     # train | id | ood | unsplit


@dataclass(frozen=True)
class BiasedSplit:
    train: tuple[str, ...]
    id_test: tuple[str, ...]
    ood_test: tuple[str, ...]
    achieved_pearson: float
    boundary: BiasBoundary


def build_biased_split(subjects: list[MeasuredSubject], boundary: BiasBoundary,
                       n_train: int, n_id: int, n_ood: int, seed: int,
                       target: str = "fat_pct") -> BiasedSplit:
    """Seeded draw of train/ID from the boundary's ID side, OOD from the other.

    Also reports the achieved Pearson correlation between the boundary's
    x feature and the task target over the train split -- the number that
    tells you how exploitable the shortcut is.
    """
    if target not in TASKS:
        raise ValueError(f"target must be one of {TASKS}")
    id_pool = [s.subject_id for s in subjects if boundary.side(s.report) == "id"]
    ood_pool = [s.subject_id for s in subjects if boundary.side(s.report) == "ood"]
    if len(id_pool) < n_train + n_id:
        raise ValueError(
            f"insufficient subjects on the id side: need {n_train + n_id}, "
            f"have {len(id_pool)}")
    if len(ood_pool) < n_ood:
        raise ValueError(
            f"insufficient subjects on the ood side: need {n_ood}, have {len(ood_pool)}")

    stream = Stream(seed)
    id_order = [id_pool[i] for i in stream.permutation(len(id_pool))]
    ood_order = [ood_pool[i] for i in stream.permutation(len(ood_pool))]
    train = tuple(id_order[:n_train])
    id_test = tuple(id_order[n_train:n_train + n_id])
    ood_test = tuple(ood_order[:n_ood])

    by_id = {s.subject_id: s for s in subjects}
    xs = [report_feature(by_id[i].report, boundary.x_feature) for i in train]
    ys = [report_feature(by_id[i].report, target) for i in train]
    r = pearson(xs, ys)
    return BiasedSplit(train=train, id_test=id_test, ood_test=ood_test,
                       achieved_pearson=r, boundary=boundary)


def rebias(subject_ids, reports: dict, boundary: BiasBoundary, side: str) -> list:
    """Cull to the subjects on the requested boundary side (idempotent)."""
    if side not in ("id", "ood"):
        raise ValueError("side must be 'id' or 'ood'")
    kept = [sid for sid in subject_ids if boundary.side(reports[sid]) == side]
    if not kept:
        warnings.warn(f"rebias kept no subjects on side {side!r}")
    return kept


@dataclass(frozen=True)
class OversampledAttrs:
    source_id: str
    binned: BinnedAttributes
    seed: int


def oversample_attributes(subjects: list[MeasuredSubject], factor: int,
                          seed: int) -> list[OversampledAttrs]:
    """Each subject's binned attribute tuple, repeated with fresh seeds."""
    if factor < 1:
        raise ValueError("oversample factor must be >= 1")
    out = []
    k = 0
    for s in subjects:
        binned = bin_attributes(s.attributes)
        for _ in range(factor):
            out.append(OversampledAttrs(source_id=s.subject_id, binned=binned,
                                        seed=subject_seed(seed, k)))
            k += 1
    return out


# --- predictors -----------------------------------------------------------


class ShortcutLinear:
    """Least-squares line from body volume to the target.

    This is the deliberate shortcut: on a biased train split, body volume
    alone predicts the target well, and the fit inherits the bias.
    """

    kind = "shortcut_linear"

    def __init__(self):
        self.slope: float | None = None
        self.intercept: float | None = None

    def fit(self, subjects: list[MeasuredSubject], target: str) -> None:
        x = np.array([s.report.body_volume_l for s in subjects], dtype=np.float64)
        y = np.array([report_feature(s.report, target) for s in subjects],
                     dtype=np.float64)
        sx = x - x.mean()
        denom = float(sx @ sx)
        if denom == 0.0:
            raise ValueError("cannot fit shortcut on constant body volume")
        self.slope = float(sx @ (y - y.mean())) / denom
        self.intercept = float(y.mean() - self.slope * x.mean())

    def predict(self, subject: MeasuredSubject, target: str) -> float:
        if self.slope is None:
            raise ValueError("predictor not fitted")
        return self.slope * subject.report.body_volume_l + self.intercept


class OracleNoise:
    """Ground truth plus seeded Gaussian noise; per-subject deterministic."""

    kind = "oracle_noise"

    def __init__(self, sigma: float = 0.5, seed: int = 0):
        if sigma < 0:
            raise ValueError("sigma must be nonnegative")
        self.sigma = sigma
        self.seed = seed

    def fit(self, subjects, target) -> None:
        pass

    def predict(self, subject: MeasuredSubject, target: str) -> float:
        y = report_feature(subject.report, target)
        stream = Stream(self.seed ^ fnv1a64(subject.subject_id.encode("utf-8")))
        return y + stream.normal1(0.0, self.sigma)


class ExternalPredictions:
    """Predictions ingested from a CSV with header subject_id,prediction."""

    kind = "external"

    def __init__(self, predictions: dict[str, float]):
        self.predictions = dict(predictions)

    @staticmethod
    def from_csv(path) -> "ExternalPredictions":
        preds = {}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["subject_id", "prediction"]:
                raise ValueError(
                    "external predictions CSV must have header subject_id,prediction")
            for row in reader:
                preds[row["subject_id"]] = float(row["prediction"])
        return ExternalPredictions(preds)

    def fit(self, subjects, target) -> None:
        pass

    def predict(self, subject: MeasuredSubject, target: str) -> float:
        if subject.subject_id not in self.predictions:
            raise ValueError(f"no external prediction for {subject.subject_id!r}")
        return self.predictions[subject.subject_id]


def make_predictor(spec: dict, seed: int = 0):
    kind = spec.get("kind", "shortcut_linear")
    if kind == "shortcut_linear":
        return ShortcutLinear()
    if kind == "oracle_noise":
        return OracleNoise(sigma=float(spec.get("sigma", 0.5)),
                           seed=int(spec.get("seed", seed)))
    if kind == "external":
        return ExternalPredictions.from_csv(spec["path"])
    raise ValueError(f"unknown predictor kind {kind!r}")


# --- attribute encoding and the OOD classifier ----------------------------

CLASSIFIER_FEATURES = ("sex_m", "sex_f", "age_mid", "age_none",
                       "height_mid", "height_none", "weight_mid", "weight_none")


def encode_binned(binned: BinnedAttributes) -> list[float]:
    """Sex one-hot, bin midpoints as ordinals, 'none' indicator columns."""
    row = [1.0 if binned.sex == "M" else 0.0, 1.0 if binned.sex == "F" else 0.0]
    for label in (binned.age, binned.height, binned.weight):
        mid = bin_midpoint(label)
        row.append(0.0 if mid is None else mid)
        row.append(1.0 if mid is None else 0.0)
    return row


def encode_attributes(attrs_list) -> np.ndarray:
    return np.array([encode_binned(bin_attributes(a)) for a in attrs_list],
                    dtype=np.float64)


def fit_ood_classifier(id_attrs, ood_attrs,
                       params: ForestParams = ForestParams(),
                       seed: int = 0) -> tuple[Forest, float]:
    """Forest over {ID=0, OOD=1} from encoded attributes.

    Returns the classifier (refit on all rows) and its stratified 80/20
    holdout accuracy.
    """
    if len(id_attrs) == 0 or len(ood_attrs) == 0:
        raise ValueError("both attribute sets must be nonempty")
    Xi = encode_attributes(id_attrs)
    Xo = encode_attributes(ood_attrs)
    X = np.vstack([Xi, Xo])
    y = np.concatenate([np.zeros(len(Xi)), np.ones(len(Xo))])

    stream = Stream(seed)
    test_rows = []
    train_rows = []
    for cls_rows in (np.arange(len(Xi)), len(Xi) + np.arange(len(Xo))):
        order = cls_rows[stream.permutation(len(cls_rows))]
        n_test = max(1, int(round(0.2 * len(order))))
        test_rows.extend(order[:n_test])
        train_rows.extend(order[n_test:])
    train_rows = np.array(sorted(train_rows))
    test_rows = np.array(sorted(test_rows))

    params = replace(params, seed=seed)
    held = fit_forest(X[train_rows], y[train_rows], "classifier", params)
    accuracy = float((predict(held, X[test_rows]) == y[test_rows]).mean())
    full = fit_forest(X, y, "classifier", params)
    return full, accuracy


def weighted_degradation_estimate(id_errors, id_attrs, classifier: Forest,
                                  priors: tuple[float, float],
                                  n_boot: int = 10000, level: float = 0.95,
                                  seed: int = 0) -> dict:
    """Importance-weighted MAE of ID errors with a pair-resampling CI."""
    errors = np.asarray(id_errors, dtype=np.float64)
    p_ood = predict_proba(classifier, encode_attributes(id_attrs))
    w = importance_weights(p_ood, priors[0], priors[1])
    point = weighted_mae(errors, w)

    stream = Stream(seed)
    n = len(errors)
    idx = stream.integers(n_boot * n, n).reshape(n_boot, n)
    e = errors[idx]
    ww = w[idx]
    stats = (e * ww).sum(axis=1) / ww.sum(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return {"mae": point, "ci": (float(lo), float(hi)), "weights": w,
            "p_ood": p_ood}


# --- trial rows -----------------------------------------------------------


@dataclass
class SubjectError:
    subject_id: str
    population: str             # id | ood
    attributes: Attributes
    report: CompositionReport
    abs_error: float


@dataclass
class TrialRow:
    population: str             # ID | OOD
    attr_dist: str              # ID | OOD
    sample_type: str
    n: int
    mae: float
    mae_ci: tuple[float, float]
    z_vs_real: float | None
    z_ci: tuple[float, float] | None
    p_value: float | None
    verdict: str


@dataclass
class AttributionBlock:
    correlations: dict          # feature -> {real, synthetic, p_value}
    importances: dict           # sample_type -> {feature: importance}
    importance_correlations: dict   # "a_vs_b" -> r
    regression_mae: dict        # sample_type -> {mae, std}
    warnings: list


@dataclass
class TrialReport:
    task: str
    boundary: BiasBoundary
    achieved_pearson: float
    counts: dict
    classifier_accuracy: float | None
    rows: list[TrialRow]
    samples: dict               # sample_type -> list[SubjectError]
    attribution: AttributionBlock | None = None

    def row(self, population: str, sample_type: str) -> TrialRow | None:
        for r in self.rows:
            if r.population == population and r.sample_type == sample_type:
                return r
        return None


def _row_seed(seed: int, population: str, sample_type: str) -> int:
    return seed ^ fnv1a64(f"{population}:{sample_type}".encode("utf-8"))


def _z_ci(x, y, n_boot: int, level: float, seed: int) -> tuple[float, float]:
    """Percentile CI of the z statistic, resampling both lists independently."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    stream = Stream(seed)
    ix = stream.integers(n_boot * len(x), len(x)).reshape(n_boot, len(x))
    iy = stream.integers(n_boot * len(y), len(y)).reshape(n_boot, len(y))
    xs = x[ix]
    ys = y[iy]
    mx, my = xs.mean(axis=1), ys.mean(axis=1)
    vx = xs.var(axis=1, ddof=1)
    vy = ys.var(axis=1, ddof=1)
    denom = np.sqrt(vx / len(x) + vy / len(y))
    with np.errstate(divide="ignore", invalid="ignore"):
        zs = np.where(denom > 0, (mx - my) / np.where(denom > 0, denom, 1.0), 0.0)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(zs, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


@dataclass(frozen=True)
class TrialOptions:
    n_boot: int = 10000
    z_boot: int = 2000
    level: float = 0.95
    seed: int = 0
    classifier_params: ForestParams = ForestParams()


def run_trial(real: dict, split: BiasedSplit, predictor, target: str,
              synth: dict, options: TrialOptions = TrialOptions()) -> TrialReport:
    """Assemble the per-population audit table.

    ``real`` maps subject_id -> MeasuredSubject for the whole cohort;
    ``synth`` maps population ("ID"/"OOD") -> list[MeasuredSubject] of
    regenerated subjects.  The predictor must already be fitted on the train
    split.  Rows: real, synthetic, re-biased synthetic per population, plus
    the importance-weighted estimate of OOD MAE from ID errors.
    """
    if target not in TASKS:
        raise ValueError(f"target must be one of {TASKS}")
    for sid in (*split.train, *split.id_test, *split.ood_test):
        if sid not in real:
            raise ValueError(f"missing measured report for subject {sid!r}")

    def errors_for(subjects) -> np.ndarray:
        out = np.empty(len(subjects), dtype=np.float64)
        for i, s in enumerate(subjects):
            out[i] = abs(report_feature(s.report, target) - predictor.predict(s, target))
        return out

    def subject_errors(subjects, errs, population) -> list[SubjectError]:
        return [SubjectError(s.subject_id, population, s.attributes, s.report,
                             float(e)) for s, e in zip(subjects, errs)]

    id_subjects = [real[sid] for sid in split.id_test]
    ood_subjects = [real[sid] for sid in split.ood_test]
    real_errors = {"ID": errors_for(id_subjects), "OOD": errors_for(ood_subjects)}

    rows: list[TrialRow] = []
    samples: dict[str, list[SubjectError]] = {t: [] for t in SAMPLE_TYPES}
    samples["real"] = (subject_errors(id_subjects, real_errors["ID"], "id")
                       + subject_errors(ood_subjects, real_errors["OOD"], "ood"))

    def add_row(population, attr_dist, sample_type, errs, with_z=True):
        errs = np.asarray(errs, dtype=np.float64)
        seed = _row_seed(options.seed, population, sample_type)
        ci = bootstrap_ci(errs, "mean", n_boot=options.n_boot,
                          level=options.level, seed=seed)
        point, verdict = float(errs.mean()), verdict_for(float(errs.mean()))
        if sample_type == "real":
            z, z_ci, p = 0.0, None, 1.0
        elif with_z:
            ref = real_errors[population]
            z = z_score(errs, ref)
            p = z_test_p(z)
            z_ci = _z_ci(errs, ref, options.z_boot, options.level, seed ^ 0x5A)
        else:
            z, z_ci, p = None, None, None
        rows.append(TrialRow(population=population, attr_dist=attr_dist,
                             sample_type=sample_type, n=len(errs), mae=point,
                             mae_ci=ci, z_vs_real=z, z_ci=z_ci, p_value=p,
                             verdict=verdict))

    add_row("ID", "ID", "real", real_errors["ID"])
    add_row("OOD", "OOD", "real", real_errors["OOD"])

    reports_by_sid = {}
    for population, key in (("ID", "ID"), ("OOD", "OOD")):
        cohort = synth.get(key, [])
        if not cohort:
            continue
        errs = errors_for(cohort)
        samples["synthetic"].extend(subject_errors(cohort, errs, population.lower()))
        add_row(population, population, "synthetic", errs)

        by_sid = {s.subject_id: s for s in cohort}
        reports_by_sid.update({sid: s.report for sid, s in by_sid.items()})
        kept = rebias(list(by_sid), {sid: s.report for sid, s in by_sid.items()},
                      split.boundary, population.lower())
        if kept:
            kept_subjects = [by_sid[sid] for sid in kept]
            kerrs = errors_for(kept_subjects)
            samples["synthetic_rebias"].extend(
                subject_errors(kept_subjects, kerrs, population.lower()))
            add_row(population, population, "synthetic_rebias", kerrs)
        else:
            warnings.warn(f"no re-biased synthetic subjects for {population}")

    # importance-weighted estimate of OOD MAE from ID errors
    classifier_accuracy = None
    if len(id_subjects) and len(ood_subjects):
        clf, classifier_accuracy = fit_ood_classifier(
            [s.attributes for s in id_subjects],
            [s.attributes for s in ood_subjects],
            params=options.classifier_params, seed=options.seed)
        n_id, n_ood = len(id_subjects), len(ood_subjects)
        priors = (n_id / (n_id + n_ood), n_ood / (n_id + n_ood))
        est = weighted_degradation_estimate(
            real_errors["ID"], [s.attributes for s in id_subjects], clf, priors,
            n_boot=options.n_boot, level=options.level,
            seed=_row_seed(options.seed, "OOD", "real_weighted"))
        rows.append(TrialRow(population="OOD", attr_dist="ID",
                             sample_type="real_weighted", n=n_id,
                             mae=est["mae"], mae_ci=est["ci"], z_vs_real=None,
                             z_ci=None, p_value=None,
                             verdict=verdict_for(est["mae"])))
        samples["real_weighted"] = subject_errors(id_subjects, real_errors["ID"], "id")

    counts = {"train": len(split.train), "id_test": len(split.id_test),
              "ood_test": len(split.ood_test),
              "synthetic": sum(len(v) for v in synth.values())}
    return TrialReport(task=target, boundary=split.boundary,
                       achieved_pearson=split.achieved_pearson, counts=counts,
                       classifier_accuracy=classifier_accuracy, rows=rows,
                       samples=samples)


# --- attribution ----------------------------------------------------------


def _sex_numeric(sex: str | None) -> float:
    if sex == "M":
        return 0.0
    if sex == "F":
        return 1.0
    return float("nan")


def feature_matrix(subject_errors: list[SubjectError]) -> np.ndarray:
    """(n, 8) matrix in FEATURE_NAMES order; missing records become NaN."""
    rows = []
    for s in subject_errors:
        a, r = s.attributes, s.report
        rows.append([
            _sex_numeric(a.sex),
            float("nan") if a.age_years is None else a.age_years,
            float("nan") if a.height_cm is None else a.height_cm,
            float("nan") if a.weight_kg is None else a.weight_kg,
            r.fat_pct,
            float("nan") if r.bone_density_hu is None else r.bone_density_hu,
            r.muscle_pct,
            r.body_volume_l,
        ])
    return np.array(rows, dtype=np.float64)


def _fisher_z_p(r1: float, n1: int, r2: float, n2: int) -> float:
    """Two-sided p for equality of two correlations via Fisher z."""
    r1 = min(max(r1, -0.999999), 0.999999)
    r2 = min(max(r2, -0.999999), 0.999999)
    if n1 <= 3 or n2 <= 3:
        return float("nan")
    z = (math.atanh(r1) - math.atanh(r2)) / math.sqrt(1.0 / (n1 - 3) + 1.0 / (n2 - 3))
    return 2.0 * (1.0 - normal_cdf(abs(z)))


def _prepare_features(errors: list[SubjectError]):
    X = feature_matrix(errors)
    y = np.array([s.abs_error for s in errors], dtype=np.float64)
    # impute column means for missing records so the forest sees full rows
    col_mean = np.nanmean(np.where(np.isfinite(X), X, np.nan), axis=0)
    col_mean = np.where(np.isfinite(col_mean), col_mean, 0.0)
    X = np.where(np.isfinite(X), X, col_mean)
    return X, y


def attribute_errors(report_or_samples, min_subjects: int = 30,
                     seed: int = 0) -> AttributionBlock:
    """Bias attribution over the 8 attributes for each sample type.

    Per attribute: Pearson correlation with |error| on real and synthetic
    subjects plus a Fisher-z p-value for their difference.  Per sample type:
    a random-forest regression of |error| on the attributes (holdout MAE,
    then a refit on all rows for normalized importances), and pairwise
    correlations between the importance vectors.
    """
    if isinstance(report_or_samples, TrialReport):
        samples = report_or_samples.samples
    else:
        samples = report_or_samples
    present = {t: v for t, v in samples.items()
               if v and t in ("real", "synthetic", "synthetic_rebias")}
    for t, v in present.items():
        if len(v) < min_subjects:
            raise ValueError(f"sample type {t!r} has {len(v)} subjects; "
                             f"need at least {min_subjects}")
    if "real" not in present:
        raise ValueError("attribution requires real samples")

    notes: list[str] = []
    prepared = {}
    for t, errs in present.items():
        X, y = _prepare_features(errs)
        keep = []
        for j in range(X.shape[1]):
            if np.ptp(X[:, j]) == 0.0:
                msg = f"{t}: constant attribute column {FEATURE_NAMES[j]!r} dropped"
                warnings.warn(msg)
                notes.append(msg)
            else:
                keep.append(j)
        prepared[t] = (X, y, keep)

    # per-attribute correlation with |error|, real vs synthetic
    correlations = {}
    Xr, yr, keep_r = prepared["real"]
    syn_key = "synthetic" if "synthetic" in prepared else None
    for j, name in enumerate(FEATURE_NAMES):
        r_real = pearson(Xr[:, j], yr) if j in keep_r else float("nan")
        entry = {"real": r_real, "synthetic": float("nan"), "p_value": float("nan")}
        if syn_key:
            Xs, ys, keep_s = prepared[syn_key]
            if j in keep_s:
                r_syn = pearson(Xs[:, j], ys)
                entry["synthetic"] = r_syn
                if j in keep_r:
                    entry["p_value"] = _fisher_z_p(r_real, len(yr), r_syn, len(ys))
        correlations[name] = entry

    importances = {}
    regression_mae = {}
    params = replace(REGRESSOR_PARAMS, max_features="all", seed=seed)
    for t, (X, y, keep) in prepared.items():
        Xk = X[:, keep]
        stream = Stream(seed ^ fnv1a64(t.encode("utf-8")))
        order = stream.permutation(len(y))
        n_test = max(1, int(round(0.2 * len(y))))
        test, train = order[:n_test], order[n_test:]
        held = fit_forest(Xk[train], y[train], "regressor", params)
        resid = np.abs(predict(held, Xk[test]) - y[test])
        regression_mae[t] = {"mae": float(resid.mean()),
                             "std": float(resid.std(ddof=1)) if len(resid) > 1 else 0.0}
        full = fit_forest(Xk, y, "regressor", params)
        imp = np.zeros(len(FEATURE_NAMES))
        imp[np.array(keep, dtype=int)] = full.importances
        importances[t] = {name: float(v) for name, v in zip(FEATURE_NAMES, imp)}

    importance_correlations = {}
    types = list(importances)
    for i in range(len(types)):
        for j in range(i + 1, len(types)):
            a = np.array([importances[types[i]][f] for f in FEATURE_NAMES])
            b = np.array([importances[types[j]][f] for f in FEATURE_NAMES])
            importance_correlations[f"{types[i]}_vs_{types[j]}"] = pearson(a, b)

    return AttributionBlock(correlations=correlations, importances=importances,
                            importance_correlations=importance_correlations,
                            regression_mae=regression_mae, warnings=notes)


# --- full-pipeline orchestration -------------------------------------------


@dataclass(frozen=True)
class TrialConfig:
    """Everything a full trial run needs; every seed is explicit."""

    task: str = "fat_pct"
    n_subjects: int = 350
    spacing_mm: tuple[float, float, float] = (4.0, 4.0, 4.0)
    cohort_seed: int = 7
    split_seed: int = 11
    synth_seed: int = 307
    trial_seed: int = 0
    n_train: int = 35
    n_id: int = 75
    n_ood: int = 75
    oversample_factor: int = 2
    boundary: BiasBoundary = BiasBoundary()
    predictor: dict = field(default_factory=lambda: {"kind": "shortcut_linear"})
    distribution: AttributeDistribution = AttributeDistribution()
    n_boot: int = 10000
    z_boot: int = 2000
    level: float = 0.95

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be positive")
        if min(self.n_train, self.n_id, self.n_ood) < 2:
            raise ValueError("train/id/ood splits need at least 2 subjects each")
        if self.oversample_factor < 1:
            raise ValueError("oversample factor must be >= 1")
        if not 0.0 < self.level < 1.0:
            raise ValueError("level must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "n_subjects": self.n_subjects,
            "spacing_mm": list(self.spacing_mm),
            "cohort_seed": self.cohort_seed,
            "split_seed": self.split_seed,
            "synth_seed": self.synth_seed,
            "trial_seed": self.trial_seed,
            "n_train": self.n_train,
            "n_id": self.n_id,
            "n_ood": self.n_ood,
            "oversample_factor": self.oversample_factor,
            "boundary": {
                "x_feature": self.boundary.x_feature,
                "y_feature": self.boundary.y_feature,
                "slope": self.boundary.slope,
                "intercept": self.boundary.intercept,
                "id_side": self.boundary.id_side,
            },
            "predictor": dict(self.predictor),
            "n_boot": self.n_boot,
            "z_boot": self.z_boot,
            "level": self.level,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrialConfig":
        d = dict(d)
        kwargs = {}
        if "boundary" in d:
            b = dict(d.pop("boundary"))
            bad = set(b) - {"x_feature", "y_feature", "slope", "intercept", "id_side"}
            if bad:
                raise ValueError(f"unknown boundary keys: {sorted(bad)}")
            kwargs["boundary"] = BiasBoundary(**b)
        if "distribution" in d:
            kwargs["distribution"] = _distribution_from_dict(d.pop("distribution"))
        if "spacing_mm" in d:
            s = d.pop("spacing_mm")
            if len(s) != 3:
                raise ValueError("spacing_mm must have three components")
            kwargs["spacing_mm"] = tuple(float(v) for v in s)
        allowed = {"task", "n_subjects", "cohort_seed", "split_seed", "synth_seed",
                   "trial_seed", "n_train", "n_id", "n_ood", "oversample_factor",
                   "predictor", "n_boot", "z_boot", "level"}
        bad = set(d) - allowed
        if bad:
            raise ValueError(f"unknown trial config keys: {sorted(bad)}")
        kwargs.update(d)
        return cls(**kwargs)

    @classmethod
    def from_json(cls, path) -> "TrialConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _distribution_from_dict(d: dict) -> AttributeDistribution:
    d = dict(d)
    kwargs = {}
    for key in ("age_range", "height_range", "weight_range"):
        if key in d:
            kwargs[key] = tuple(float(v) for v in d.pop(key))
    for key in ("height_mean", "height_sd", "weight_mean", "weight_sd"):
        if key in d:
            kwargs[key] = {str(k): float(v) for k, v in d.pop(key).items()}
    allowed = {"p_female", "age_mean", "age_sd", "height_weight_corr", "missing_rate"}
    bad = set(d) - allowed
    if bad:
        raise ValueError(f"unknown distribution keys: {sorted(bad)}")
    kwargs.update(d)
    return AttributeDistribution(**kwargs)


def _map_ordered(fn, items, threads: int):
    """Map preserving order; thread count never changes the result."""
    if threads and threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(fn, items))
    return [fn(item) for item in items]


def generate_measured_cohort(n: int, dist: AttributeDistribution, spacing,
                             seed: int, threads: int = 1) -> list[MeasuredSubject]:
    """Generate n phantoms in memory and measure their composition."""

    def build(item):
        subject_id, attrs, spec = item
        vol, tissue, _structure, _truth = generate_phantom(spec)
        return MeasuredSubject(subject_id, attrs, measure_composition(vol, tissue))

    return _map_ordered(build, sample_cohort_specs(n, dist, spacing, seed), threads)


def synthesize_matched_cohort(subjects: list[MeasuredSubject], factor: int,
                              dist: AttributeDistribution, spacing, seed: int,
                              id_prefix: str = "syn", threads: int = 1,
                              ) -> list[MeasuredSubject]:
    """Regenerate a cohort from binned attributes via fresh phantoms.

    Only the attribute bins survive the round trip; composition is redrawn
    from the conditional model, so residual (non-attribute) structure in the
    source cohort is deliberately not reproduced.
    """
    plan = oversample_attributes(subjects, factor, seed)

    def build(item):
        k, o = item
        spec = generate_matched_spec(o.binned, dist, spacing, o.seed)
        vol, tissue, _structure, _truth = generate_phantom(spec)
        attrs = Attributes(spec.sex, spec.age_years, spec.height_cm, spec.weight_kg)
        return MeasuredSubject(f"{id_prefix}_{k:04d}", attrs,
                               measure_composition(vol, tissue))

    return _map_ordered(build, list(enumerate(plan)), threads)


def run_full_vct(config: TrialConfig = TrialConfig(), threads: int = 1,
                 cohort: list[MeasuredSubject] | None = None) -> TrialReport:
    """Cohort -> biased split -> predictor fit -> audit -> attribution.

    ``cohort`` short-circuits generation when a measured cohort is already
    in hand (e.g. loaded from a manifest); otherwise one is generated from
    the config's distribution and seeds.
    """
    if cohort is None:
        cohort = generate_measured_cohort(config.n_subjects, config.distribution,
                                          config.spacing_mm, config.cohort_seed,
                                          threads=threads)
    real = {s.subject_id: s for s in cohort}
    split = build_biased_split(cohort, config.boundary, config.n_train,
                               config.n_id, config.n_ood, config.split_seed,
                               target=config.task)
    predictor = make_predictor(config.predictor, seed=config.trial_seed)
    predictor.fit([real[sid] for sid in split.train], config.task)

    synth = {
        "ID": synthesize_matched_cohort(
            [real[sid] for sid in split.id_test], config.oversample_factor,
            config.distribution, config.spacing_mm, config.synth_seed,
            id_prefix="syn_id", threads=threads),
        "OOD": synthesize_matched_cohort(
            [real[sid] for sid in split.ood_test], config.oversample_factor,
            config.distribution, config.spacing_mm, config.synth_seed + 1,
            id_prefix="syn_ood", threads=threads),
    }
    options = TrialOptions(n_boot=config.n_boot, z_boot=config.z_boot,
                           level=config.level, seed=config.trial_seed)
    report = run_trial(real, split, predictor, config.task, synth, options)
    try:
        report.attribution = attribute_errors(report, seed=config.trial_seed)
    except ValueError as exc:
        warnings.warn(f"attribution skipped: {exc}")
    return report


# --- report serialization ---------------------------------------------------

_TYPE_ORDER = {"real": 0, "real_weighted": 1, "synthetic": 2, "synthetic_rebias": 3}
_POP_ORDER = {"ID": 0, "OOD": 1}


def _sorted_rows(rows: list[TrialRow]) -> list[TrialRow]:
    return sorted(rows, key=lambda r: (_POP_ORDER[r.population],
                                       _TYPE_ORDER[r.sample_type]))


def report_to_dict(report: TrialReport, config: TrialConfig | None = None) -> dict:
    rows = []
    for r in _sorted_rows(report.rows):
        rows.append({
            "population": r.population,
            "attr_dist": r.attr_dist,
            "sample_type": r.sample_type,
            "n": r.n,
            "mae": r.mae,
            "mae_ci": list(r.mae_ci),
            "z_vs_real": r.z_vs_real,
            "z_ci": list(r.z_ci) if r.z_ci is not None else None,
            "p_value": r.p_value,
            "verdict": r.verdict,
        })
    b = report.boundary
    out = {
        "task": report.task,
        "boundary": {"x_feature": b.x_feature, "y_feature": b.y_feature,
                     "slope": b.slope, "intercept": b.intercept,
                     "id_side": b.id_side},
        "achieved_pearson": report.achieved_pearson,
        "counts": dict(report.counts),
        "classifier_accuracy": report.classifier_accuracy,
        "verdicts": {r.population: r.verdict
                     for r in report.rows if r.sample_type == "real"},
        "rows": rows,
        "attribution": None,
    }
    if report.attribution is not None:
        a = report.attribution
        out["attribution"] = {
            "correlations": a.correlations,
            "importances": a.importances,
            "importance_correlations": a.importance_correlations,
            "regression_mae": a.regression_mae,
            "warnings": list(a.warnings),
        }
    if config is not None:
        out["config"] = config.to_dict()
    return out


def _cell(value) -> str:
    return "" if value is None else repr(value)


def write_zscores_csv(report: TrialReport, path) -> Path:
    header = ["population", "attr_dist", "sample_type", "n", "mae",
              "mae_ci_low", "mae_ci_high", "z_vs_real", "z_ci_low",
              "z_ci_high", "p_value", "verdict"]
    p = Path(path)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for r in _sorted_rows(report.rows):
            z_lo, z_hi = r.z_ci if r.z_ci is not None else (None, None)
            writer.writerow([
                r.population, r.attr_dist, r.sample_type, r.n, repr(r.mae),
                repr(r.mae_ci[0]), repr(r.mae_ci[1]), _cell(r.z_vs_real),
                _cell(z_lo), _cell(z_hi), _cell(r.p_value), r.verdict])
    return p


def write_bias_corr_csv(attribution: AttributionBlock, path) -> Path:
    p = Path(path)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute", "r_real", "r_synthetic", "p_value"])
        for name in FEATURE_NAMES:
            entry = attribution.correlations[name]
            writer.writerow([name, _nan_cell(entry["real"]),
                             _nan_cell(entry["synthetic"]),
                             _nan_cell(entry["p_value"])])
    return p


def _nan_cell(v: float) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else repr(v)


def write_feat_import_csv(attribution: AttributionBlock, path) -> Path:
    types = [t for t in ("real", "synthetic", "synthetic_rebias")
             if t in attribution.importances]
    p = Path(path)
    with open(p, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["attribute"] + types)
        for name in FEATURE_NAMES:
            writer.writerow([name] + [repr(attribution.importances[t][name])
                                      for t in types])
        corr_row = ["correlation_vs_real"]
        for t in types:
            if t == "real":
                corr_row.append("")
            else:
                key = f"real_vs_{t}" if f"real_vs_{t}" in \
                    attribution.importance_correlations else f"{t}_vs_real"
                corr_row.append(_nan_cell(attribution.importance_correlations.get(key)))
        writer.writerow(corr_row)
    return p


def write_trial_outputs(report: TrialReport, out_dir,
                        config: TrialConfig | None = None) -> list[Path]:
    """report.json plus the three audit CSVs; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    payload = report_to_dict(report, config)
    rp = out / "report.json"
    rp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                  encoding="utf-8")
    written.append(rp)
    written.append(write_zscores_csv(report, out / "zscores.csv"))
    if report.attribution is not None:
        written.append(write_bias_corr_csv(report.attribution, out / "bias_corr.csv"))
        written.append(write_feat_import_csv(report.attribution,
                                             out / "feat_import.csv"))
    return written
