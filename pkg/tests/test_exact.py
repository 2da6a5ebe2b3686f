"""Closed-form induced priors: densities, origin limits, sampling."""
import math

import numpy as np
import pytest
from scipy import integrate, stats

from r2d2prior._util import ks_distance
from r2d2prior.distributions import beta4_cdf, beta4_pdf
from r2d2prior.errors import UnsupportedFamily
from r2d2prior.exact import InducedPrior, induced_pdf, induced_sample, origin_limit
from r2d2prior.families import ModelFamily, R2PriorSpec, r2_exact, weibull_r2_max


def fd_oracle(prior, w, h_scale=1e-5):
    """Change-of-variables density with a finite-difference derivative."""
    fam, b0 = prior.family, prior.beta0
    h = h_scale * np.maximum(w, 1.0)
    fd = (r2_exact(fam, b0, w + h) - r2_exact(fam, b0, np.maximum(w - h, 0.0))) \
        / (w + h - np.maximum(w - h, 0.0))
    return beta4_pdf(r2_exact(fam, b0, w), prior.spec) * np.abs(fd)


class TestConstruction:
    def test_bounds_autofilled(self):
        pr = InducedPrior.from_beta(ModelFamily.zero_inflated_poisson(0.3), 0.0, 1, 4)
        assert pr.spec.r2_max == pytest.approx(0.7)

    def test_mismatched_bounds_rejected(self):
        with pytest.raises(ValueError):
            InducedPrior(ModelFamily.zero_inflated_poisson(0.3), 0.0,
                         R2PriorSpec(1, 4, 0.0, 1.0))

    def test_logistic_rejected(self):
        with pytest.raises(UnsupportedFamily):
            InducedPrior.from_beta(ModelFamily.logistic(), 0.0, 1, 1)


class TestDensity:
    def test_locscale_is_beta_prime(self):
        pr = InducedPrior.from_beta(ModelFamily.location_scale(1.0), 0.0, 1, 1)
        assert induced_pdf(pr, 1.0) == pytest.approx(0.25)

    def test_poisson_origin_value_a1(self):
        pr = InducedPrior.from_beta(ModelFamily.poisson(), 0.7, 1.0, 4.0)
        assert induced_pdf(pr, 1e-12) == pytest.approx(4.0 * math.exp(0.7), rel=1e-6)

    def test_negbin_theta_one_equals_poisson(self):
        w = np.array([0.1, 0.5, 1.0, 2.0, 5.0])
        pr_nb = InducedPrior.from_beta(ModelFamily.neg_binomial(1.0), 0.4, 2, 3)
        pr_po = InducedPrior.from_beta(ModelFamily.poisson(), 0.4, 2, 3)
        np.testing.assert_allclose(induced_pdf(pr_nb, w), induced_pdf(pr_po, w),
                                   rtol=1e-12)

    def test_matches_fd_oracle(self, exact_families):
        w = np.geomspace(0.02, 10, 100)
        for name, fam in exact_families.items():
            pr = InducedPrior.from_beta(fam, 0.4, 1.7, 2.3)
            mine = induced_pdf(pr, w)
            oracle = fd_oracle(pr, w)
            np.testing.assert_allclose(mine, oracle, rtol=1e-5, err_msg=name)

    def test_normalization_spot(self, exact_families):
        for name, fam in exact_families.items():
            pr = InducedPrior.from_beta(fam, -1.0, 0.5, 4.0)
            val = integrate.quad(lambda v: float(induced_pdf(pr, v / (1 - v))) / (1 - v) ** 2,
                                 0, 1, limit=400)[0]
            assert val == pytest.approx(1.0, abs=1e-6), name

    def test_weibull_closed_form(self):
        # (1-r)^b e^w (e^w - 1)^(a-1) / {B(a,b) (e^w - r)^(a+b)}
        th, a, b = 1.5, 2.0, 3.0
        r = weibull_r2_max(th)
        pr = InducedPrior.from_beta(ModelFamily.weibull(th), 0.9, a, b)
        w = np.array([0.3, 1.1, 2.5])
        ew = np.exp(w)
        expect = ((1 - r) ** b * ew * (ew - 1) ** (a - 1)
                  / (math.exp(math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b))
                     * (ew - r) ** (a + b)))
        np.testing.assert_allclose(induced_pdf(pr, w), expect, rtol=1e-10)

    def test_tail_contrast_heavy_vs_light(self):
        fam = ModelFamily.location_scale(1.0)
        heavy = InducedPrior.from_beta(fam, 0.0, 4, 1)
        light = InducedPrior.from_beta(fam, 0.0, 1, 4)
        w = np.linspace(5, 50, 60)
        ratio = induced_pdf(heavy, w) / induced_pdf(light, w)
        assert np.all(np.diff(ratio) > 0)

    def test_poisson_exponential_tail(self):
        # log density decays asymptotically linearly: second difference of
        # the log density settles to a nonpositive constant
        pr = InducedPrior.from_beta(ModelFamily.poisson(), 0.0, 2, 2)
        w = np.arange(20.0, 40.0, 0.5)
        logd = np.log(induced_pdf(pr, w))
        d2 = np.diff(logd, 2)
        assert np.all(d2 <= 1e-8)
        assert abs(d2[-1]) < 1e-6


class TestOriginLimit:
    def test_trichotomy(self, exact_families):
        for name, fam in exact_families.items():
            assert origin_limit(InducedPrior.from_beta(fam, 0.3, 0.5, 1)) == math.inf, name
            assert origin_limit(InducedPrior.from_beta(fam, 0.3, 2.0, 1)) == 0.0, name

    def test_poisson_a1(self):
        pr = InducedPrior.from_beta(ModelFamily.poisson(), 0.0, 1.0, 4.0)
        assert origin_limit(pr) == pytest.approx(4.0)

    def test_negbin_a1(self):
        pr = InducedPrior.from_beta(ModelFamily.neg_binomial(2.0), 0.0, 1.0, 1.0)
        assert origin_limit(pr) == pytest.approx(0.5)

    def test_weibull_a1(self):
        th = 1.5
        pr = InducedPrior.from_beta(ModelFamily.weibull(th), 0.0, 1.0, 2.0)
        assert origin_limit(pr) == pytest.approx(2.0 / (1 - weibull_r2_max(th)))

    def test_zip_a1(self):
        th, b0, b = 0.3, 0.4, 2.0
        pr = InducedPrior.from_beta(ModelFamily.zero_inflated_poisson(th), b0, 1.0, b)
        assert origin_limit(pr) == pytest.approx(b / (th + math.exp(-b0)))

    def test_limit_matches_density_near_zero(self, exact_families):
        for name, fam in exact_families.items():
            pr = InducedPrior.from_beta(fam, -0.5, 1.0, 3.0)
            assert induced_pdf(pr, 1e-10) == pytest.approx(origin_limit(pr), rel=1e-5), name


class TestSampling:
    def test_locscale_closed_form(self):
        pr = InducedPrior.from_beta(ModelFamily.location_scale(2.0), 0.0, 1, 1)
        draws = induced_sample(pr, 2000, seed=1)
        # W = sigma2 R2/(1-R2): the median of R2 is 1/2, so median(W) ~ sigma2
        assert np.median(draws) == pytest.approx(2.0, rel=0.2)

    def test_round_trip_ks(self, exact_families):
        for name, fam in exact_families.items():
            pr = InducedPrior.from_beta(fam, 0.3, 1.0, 4.0)
            draws = induced_sample(pr, 100_000, seed=11)
            r2 = np.clip(r2_exact(fam, 0.3, draws), pr.spec.r2_min, pr.spec.r2_max)
            assert ks_distance(r2, lambda x: beta4_cdf(x, pr.spec)) < 0.01, name

    def test_histogram_matches_density(self):
        pr = InducedPrior.from_beta(ModelFamily.poisson(), 0.0, 2.0, 2.0)
        draws = induced_sample(pr, 100_000, seed=3)
        edges = np.quantile(draws, np.linspace(0, 1, 51))
        edges[0], edges[-1] = 0.0, draws.max() * 1.0001
        counts, _ = np.histogram(draws, edges)
        probs = [integrate.quad(lambda v: float(induced_pdf(pr, v)), lo, hi, limit=200)[0]
                 for lo, hi in zip(edges[:-1], edges[1:])]
        stat, p = stats.chisquare(counts, np.array(probs) / sum(probs) * len(draws))
        assert p > 0.01

    def test_reproducible(self):
        pr = InducedPrior.from_beta(ModelFamily.neg_binomial(2.0), 0.1, 1, 1)
        a = induced_sample(pr, 500, seed=9)
        b = induced_sample(pr, 500, seed=9)
        np.testing.assert_array_equal(a, b)
