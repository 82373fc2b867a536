"""Statistical primitives: Z-scores, bootstrap CIs, correlation, weighting.

The two-sample Z-score compares list means under sample variances::

    z = (mean(x) - mean(y)) / sqrt(var(x)/|x| + var(y)/|y|)

with variances using the n-1 denominator.  Its two-sided p-value is
``2 * (1 - Phi(|z|))`` with the normal CDF evaluated through ``math.erf``.
Confidence intervals are percentile bootstrap with a seeded stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import Stream


@dataclass(frozen=True)
class SampleStats:
    n: int
    mean: float
    sd: float | None


def sample_stats(samples) -> SampleStats:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 1 or len(x) == 0:
        raise ValueError("samples must be a nonempty 1-D sequence")
    sd = float(x.std(ddof=1)) if len(x) >= 2 else None
    return SampleStats(len(x), float(x.mean()), sd)


def _check_finite_1d(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 1 or len(a) == 0:
        raise ValueError(f"{name} must be a nonempty 1-D sequence")
    if not np.isfinite(a).all():
        raise ValueError(f"{name} must be finite")
    return a


def z_score(x, y) -> float:
    """Two-sample Z comparing mean(x) against mean(y)."""
    a = _check_finite_1d(x, "x")
    b = _check_finite_1d(y, "y")
    if len(a) < 2 or len(b) < 2:
        raise ValueError("z_score needs at least two samples per list")
    num = float(a.mean() - b.mean())
    denom_sq = a.var(ddof=1) / len(a) + b.var(ddof=1) / len(b)
    if denom_sq == 0.0:
        if num == 0.0:
            return 0.0
        raise ValueError("zero variance in both lists with differing means (infinite z)")
    return num / math.sqrt(denom_sq)


def normal_cdf(t: float) -> float:
    return 0.5 * (1.0 + math.erf(t / math.sqrt(2.0)))


def z_test_p(z: float) -> float:
    """Two-sided normal p-value of a Z statistic."""
    if not math.isfinite(z):
        raise ValueError("z must be finite")
    return 2.0 * (1.0 - normal_cdf(abs(z)))


def pearson(x, y) -> float:
    a = _check_finite_1d(x, "x")
    b = _check_finite_1d(y, "y")
    if a.shape != b.shape:
        raise ValueError("pearson inputs must have equal length")
    if len(a) < 2:
        raise ValueError("pearson needs at least two points")
    sa = a - a.mean()
    sb = b - b.mean()
    va = float(sa @ sa)
    vb = float(sb @ sb)
    if va == 0.0 or vb == 0.0:
        raise ValueError("pearson is undefined for constant input")
    return float(sa @ sb) / math.sqrt(va * vb)


def mae(errors) -> float:
    e = _check_finite_1d(errors, "errors")
    return float(np.abs(e).mean())


def weighted_mae(errors, weights) -> float:
    """sum(w * |e|) / sum(w)."""
    e = _check_finite_1d(errors, "errors")
    w = _check_finite_1d(weights, "weights")
    if e.shape != w.shape:
        raise ValueError("errors and weights must have equal length")
    if (w < 0).any():
        raise ValueError("weights must be nonnegative")
    total = float(w.sum())
    if total <= 0.0:
        raise ValueError("weights sum to zero")
    return float((w * np.abs(e)).sum() / total)


_STATISTICS = {
    "mean": lambda m: m.mean(axis=1),
    "mean_abs": lambda m: np.abs(m).mean(axis=1),
}


def bootstrap_ci(samples, statistic="mean", n_boot: int = 10000,
                 level: float = 0.95, seed: int = 0) -> tuple[float, float]:
    """Seeded percentile-bootstrap confidence interval.

    ``statistic`` is "mean", "mean_abs", or a callable mapping the
    (n_boot, n) resample matrix to an (n_boot,) vector of statistics.
    """
    x = _check_finite_1d(samples, "samples")
    if n_boot < 1:
        raise ValueError("n_boot must be positive")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    fn = _STATISTICS.get(statistic, statistic)
    if not callable(fn):
        raise ValueError(f"unknown statistic {statistic!r}")
    stream = Stream(seed)
    n = len(x)
    stats = np.empty(n_boot, dtype=np.float64)
    chunk = max(1, min(n_boot, 4_000_000 // max(n, 1)))
    done = 0
    while done < n_boot:
        b = min(chunk, n_boot - done)
        idx = stream.integers(b * n, n).reshape(b, n)
        stats[done:done + b] = fn(x[idx])
        done += b
    alpha = (1.0 - level) / 2.0
    lo, hi = np.quantile(stats, [alpha, 1.0 - alpha])
    return float(lo), float(hi)


def importance_weights(p_ood, prior_id: float, prior_ood: float) -> np.ndarray:
    """Density-ratio weights w = p/(1-p) * prior_id/prior_ood.

    ``p_ood`` are classifier probabilities in [0, 1]; they are clipped to at
    most 1 - 1e-6 before the odds ratio.  Priors must be positive and sum
    to 1 within 1e-9.
    """
    p = np.asarray(p_ood, dtype=np.float64)
    if p.ndim != 1 or len(p) == 0:
        raise ValueError("p_ood must be a nonempty 1-D sequence")
    if not np.isfinite(p).all() or (p < 0).any() or (p > 1).any():
        raise ValueError("p_ood values must lie in [0, 1]")
    if prior_id <= 0 or prior_ood <= 0:
        raise ValueError("priors must be positive")
    if abs(prior_id + prior_ood - 1.0) > 1e-9:
        raise ValueError("priors must sum to 1")
    p = np.minimum(p, 1.0 - 1e-6)
    return p / (1.0 - p) * (prior_id / prior_ood)
