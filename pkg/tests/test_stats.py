import math

import mpmath
import numpy as np
import pytest

from doloop.errors import DegenerateVariance, LengthMismatch
from doloop.stats import bonferroni, bonferroni_threshold, cohens_d, paired_t_test, summarize


def reference_paired_t(a, b):
    """Separately coded paired t-test: textbook formula with the t CDF
    evaluated through mpmath's regularized incomplete beta."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    d = a - b
    n = d.size
    mean = d.sum() / n
    var = ((d - mean) ** 2).sum() / (n - 1)
    t = mean / math.sqrt(var / n)
    nu = n - 1
    x = nu / (nu + t * t)
    # two-sided p = I_x(nu/2, 1/2) for the absolute statistic
    p = float(mpmath.betainc(nu / 2.0, 0.5, 0, x, regularized=True))
    return t, p


def reference_cohens_d(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    va = ((a - a.mean()) ** 2).sum() / (na - 1)
    vb = ((b - b.mean()) ** 2).sum() / (nb - 1)
    pooled = math.sqrt(((na - 1) * va + (nb - 1) * vb) / (na + nb - 2))
    return (a.mean() - b.mean()) / pooled


FIXED_DATASETS = [
    ((30.0, 31.0, 25.0, 29.0, 32.0), (28.0, 30.0, 24.0, 27.0, 30.0)),
    ((2.06, 2.10, 1.93, 2.19, 2.03), (0.92, 0.61, 1.73, 0.54, 0.88)),
    ((0.3, 0.61, 0.7, 0.9, 1.73), (0.25, 0.66, 0.5, 1.1, 1.0)),
]


class TestPairedT:
    @pytest.mark.parametrize("a,b", FIXED_DATASETS)
    def test_matches_independent_reference(self, a, b):
        t, p = paired_t_test(a, b)
        t_ref, p_ref = reference_paired_t(a, b)
        assert t == pytest.approx(t_ref, abs=1e-6)
        assert p == pytest.approx(p_ref, abs=1e-6)

    def test_equal_samples_degenerate(self):
        with pytest.raises(DegenerateVariance):
            paired_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])

    def test_constant_shift_tiny_p(self):
        g = np.random.default_rng(0)
        b = g.normal(size=6)
        a = b + 1.0 + g.normal(scale=1e-3, size=6)
        _, p = paired_t_test(a, b)
        assert p < 1e-6

    def test_length_mismatch(self):
        with pytest.raises(LengthMismatch):
            paired_t_test([1.0, 2.0], [1.0])


class TestBonferroni:
    def test_multiplies_and_caps(self):
        assert bonferroni(0.01, 4) == pytest.approx(0.04)
        assert bonferroni(0.4, 4) == 1.0

    def test_threshold_for_four_comparisons(self):
        assert bonferroni_threshold(0.05, 4) == pytest.approx(0.0125)


class TestCohensD:
    @pytest.mark.parametrize("a,b", FIXED_DATASETS)
    def test_matches_reference(self, a, b):
        assert cohens_d(a, b) == pytest.approx(reference_cohens_d(a, b), abs=1e-6)

    def test_degenerate_pool_is_infinite(self):
        assert cohens_d((2.0, 2.0, 2.0), (0.0, 0.0, 0.0)) == math.inf
        assert cohens_d((0.0, 0.0, 0.0), (2.0, 2.0, 2.0)) == -math.inf


class TestSummarize:
    def test_median_order_statistic(self):
        s = summarize([0.3, 0.61, 0.7, 0.9, 1.73])
        assert s.median == pytest.approx(0.7)

    def test_ci_brackets_mean(self):
        s = summarize([1.0, 2.0, 3.0, 4.0, 5.0])
        assert s.ci_lo < s.mean < s.ci_hi
        # t-based 95% CI for n=5: mean +/- 2.776 * s/sqrt(5)
        half = 2.7764451052 * s.std / math.sqrt(5)
        assert s.ci_lo == pytest.approx(s.mean - half, abs=1e-6)
        assert s.ci_hi == pytest.approx(s.mean + half, abs=1e-6)
