"""Run-level statistics: paired t-tests, Bonferroni, effect sizes, summaries."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import DegenerateVariance, LengthMismatch


def paired_t_test(a, b) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p value)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise LengthMismatch("need two equal-length 1-d samples")
    n = a.size
    if n < 2:
        raise DegenerateVariance("need at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0.0:
        raise DegenerateVariance("zero variance of paired differences")
    t = float(d.mean() / (sd / math.sqrt(n)))
    # stdtr is the CDF of Student's t with n-1 degrees of freedom
    p = float(2.0 * special.stdtr(n - 1, -abs(t)))
    return t, p


def one_sided_p(t: float, n: int, alternative: str = "greater") -> float:
    """One-sided p value for a paired t statistic with n pairs."""
    if alternative == "greater":
        return float(special.stdtr(n - 1, -t))
    return float(special.stdtr(n - 1, t))


def bonferroni(p: float, m: int) -> float:
    """Multiply by the comparison count, capped at 1."""
    return min(1.0, p * m)


def bonferroni_threshold(alpha: float, m: int) -> float:
    """Per-comparison significance threshold alpha / m."""
    return alpha / m


def cohens_d(a, b) -> float:
    """Pooled-standard-deviation effect size; infinite when the pool is degenerate."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = a.size, b.size
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    diff = float(a.mean() - b.mean())
    if pooled == 0.0:
        return math.inf if diff > 0 else (-math.inf if diff < 0 else 0.0)
    return diff / pooled


@dataclass(frozen=True)
class Summary:
    n: int
    mean: float
    std: float
    median: float
    ci_lo: float
    ci_hi: float


def summarize(values) -> Summary:
    """Mean, sample std, median, and t-based 95% confidence interval."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    mean = float(x.mean())
    if n < 2:
        return Summary(n, mean, 0.0, mean, mean, mean)
    std = float(x.std(ddof=1))
    # two-sided 97.5% quantile of t with n-1 dof via the inverse CDF
    tq = float(special.stdtrit(n - 1, 0.975))
    half = tq * std / math.sqrt(n)
    return Summary(n, mean, std, float(np.median(x)), mean - half, mean + half)
