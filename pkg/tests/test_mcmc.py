"""Sampler correctness: conjugate oracle, prior recovery, invariants."""
import math

import numpy as np
import pytest

from r2d2prior._util import ks_distance
from r2d2prior.dataio import Dataset
from r2d2prior.distributions import GbpParams, gbp_cdf
from r2d2prior.errors import DimensionMismatch, UnsupportedCombination
from r2d2prior.families import ModelFamily, R2PriorSpec
from r2d2prior.mcmc import (
    GlmmSpec,
    GroupSpec,
    HorseshoePrior,
    McmcConfig,
    PCPrior,
    R2D2Prior,
    SpatialExponential,
    VaguePrior,
    build_model,
    effective_samples_per_second,
    ess,
    posterior_r2n,
    run_chain,
)


def toy_gaussian(rng, n=60, p=2):
    X = rng.standard_normal((n, p))
    X = (X - X.mean(0)) / X.std(0, ddof=1)
    y = 0.8 + X @ np.array([0.5, -0.4])[:p] + rng.normal(0, 0.6, n)
    return Dataset(y=y, X=X, groups=np.zeros((n, 0)))


class TestBuildModel:
    def test_dimension_mismatch(self, rng):
        data = toy_gaussian(rng)
        spec = GlmmSpec(ModelFamily.gaussian(1.0), p=3, groups=())
        with pytest.raises(DimensionMismatch):
            build_model(spec, VaguePrior(), data)

    def test_horseshoe_with_random_effects_rejected(self, rng):
        data = Dataset(y=rng.poisson(1.0, 20).astype(float),
                       X=rng.standard_normal((20, 2)),
                       groups=rng.integers(0, 3, (20, 1)))
        spec = GlmmSpec(ModelFamily.poisson(), p=2, groups=(GroupSpec(3),))
        with pytest.raises(UnsupportedCombination):
            build_model(spec, HorseshoePrior(), data)

    def test_r2d2_needs_gbp_for_non_gaussian(self, rng):
        data = Dataset(y=rng.poisson(1.0, 20).astype(float),
                       X=rng.standard_normal((20, 1)), groups=np.zeros((20, 0)))
        spec = GlmmSpec(ModelFamily.poisson(), p=1, groups=())
        with pytest.raises(UnsupportedCombination):
            build_model(spec, R2D2Prior(R2PriorSpec(1, 1)), data)

    def test_xi_length_checked(self, rng):
        data = toy_gaussian(rng)
        spec = GlmmSpec(ModelFamily.gaussian(1.0), p=2, groups=())
        with pytest.raises(DimensionMismatch):
            build_model(spec, R2D2Prior(R2PriorSpec(1, 1), xi=(1.0,)), data)

    def test_intercept_plus_one_group_is_valid(self, rng):
        data = Dataset(y=rng.normal(0, 1, 12), X=np.zeros((12, 0)),
                       groups=rng.integers(0, 4, (12, 1)))
        spec = GlmmSpec(ModelFamily.gaussian(1.0), p=0, groups=(GroupSpec(4),))
        model = build_model(spec, R2D2Prior(R2PriorSpec(1, 1)), data)
        assert model.n_phi == 1


class TestConjugateOracle:
    def test_beta_posterior_moments(self, rng):
        n, p = 80, 3
        X = rng.standard_normal((n, p))
        X = (X - X.mean(0)) / X.std(0, ddof=1)
        sigma2 = 0.5
        y = 1.0 + X @ np.array([0.5, -0.3, 0.2]) + rng.normal(0, math.sqrt(sigma2), n)
        data = Dataset(y=y, X=X, groups=np.zeros((n, 0)))
        spec = GlmmSpec(ModelFamily.gaussian(1.0), p=p, groups=())
        W_fix, phi_fix = 2.0, np.full(p, 1 / 3)
        cfg = McmcConfig(iters=21_000, burn_in=1_000, seed=11, fix_w=W_fix,
                         fix_phi=phi_fix, fix_sigma2=sigma2, beta0_prior_var=100.0)
        s = run_chain(build_model(spec, R2D2Prior(R2PriorSpec(1, 1)), data), cfg)

        A = np.hstack([np.ones((n, 1)), X])
        P = A.T @ A / sigma2 + np.diag([1 / 100.0, *(1 / (phi_fix * W_fix))])
        cov = np.linalg.inv(P)
        mean = cov @ (A.T @ y / sigma2)
        draws = np.column_stack([s.beta0, s.beta])
        S = len(s)
        se_mean = np.sqrt(np.diag(cov) / S)
        assert np.all(np.abs(draws.mean(0) - mean) < 3 * se_mean)
        # covariance entries: MC standard error of a covariance is about
        # sqrt((cov_ii cov_jj + cov_ij^2) / S) for exact draws
        got = np.cov(draws.T)
        se_cov = np.sqrt((np.outer(np.diag(cov), np.diag(cov)) + cov ** 2) / S)
        assert np.all(np.abs(got - cov) < 3 * se_cov)


class TestPriorRecovery:
    def test_w_marginal_matches_gbp(self, rng):
        gbp = GbpParams(0.5, 1.83, 2.0, 1.45)
        spec = GlmmSpec(ModelFamily.poisson(), p=1, groups=(GroupSpec(3),))
        data = Dataset(y=np.zeros(30), X=rng.standard_normal((30, 1)),
                       groups=rng.integers(0, 3, (30, 1)))
        cfg = McmcConfig(iters=160_000, burn_in=10_000, seed=5, thin=10,
                         likelihood=False)
        s = run_chain(build_model(spec, R2D2Prior(R2PriorSpec(1, 1), gbp=gbp), data), cfg)
        assert ks_distance(s.W, lambda w: gbp_cdf(w, gbp)) < 0.02


class TestChainInvariants:
    @pytest.fixture(scope="class")
    def poisson_fit(self):
        rng = np.random.default_rng(2)
        n, p, L = 60, 2, 5
        X = rng.standard_normal((n, p))
        g = rng.integers(0, L, (n, 1))
        u = rng.normal(0, 0.5, L)
        y = rng.poisson(np.exp(0.2 + X @ [0.3, -0.2] + u[g[:, 0]])).astype(float)
        data = Dataset(y=y, X=(X - X.mean(0)) / X.std(0, ddof=1), groups=g)
        spec = GlmmSpec(ModelFamily.poisson(), p=p, groups=(GroupSpec(L),))
        prior = R2D2Prior(R2PriorSpec(1, 1), gbp=GbpParams(0.5, 1.83, 2.0, 1.45))
        cfg = McmcConfig(iters=4_000, burn_in=2_000, seed=7)
        model = build_model(spec, prior, data)
        return run_chain(model, cfg), model

    def test_phi_on_simplex(self, poisson_fit):
        s, _ = poisson_fit
        np.testing.assert_allclose(s.phi.sum(axis=1), 1.0, atol=1e-10)
        assert np.all(s.phi >= 0)

    def test_sigma2_u_is_phi_times_w(self, poisson_fit):
        s, model = poisson_fit
        k_idx = model.phi_index_group(0)
        np.testing.assert_allclose(s.sigma2_u[:, 0], s.phi[:, k_idx] * s.W, rtol=1e-12)

    def test_acceptance_rates_in_window(self, poisson_fit):
        s, _ = poisson_fit
        for name, rates in s.acceptance.items():
            assert np.all((rates > 0.2) & (rates < 0.6)), (name, rates)

    def test_r2n_in_unit_interval(self, poisson_fit):
        s, _ = poisson_fit
        assert np.all((s.r2n >= 0) & (s.r2n <= 1))

    def test_posterior_r2n_recompute(self, poisson_fit):
        s, model = poisson_fit
        np.testing.assert_allclose(posterior_r2n(s, None, model), s.r2n, rtol=1e-12)

    def test_trace_columns(self, poisson_fit, tmp_path):
        s, _ = poisson_fit
        path = tmp_path / "trace.csv"
        s.to_csv(path)
        header = path.read_text().splitlines()[0].split(",")
        assert header[0] == "beta0"
        assert "beta[1]" in header and "beta[2]" in header
        assert "u[1][1]" in header and "u[1][5]" in header
        assert "phi[1]" in header and "W" in header and header[-1] == "r2n"


class TestSpatial:
    def test_spatial_chain_runs_and_is_pd(self, rng):
        L, n = 8, 40
        coords = rng.uniform(0, 10, (L, 2))
        g = rng.integers(0, L, (n, 1))
        y = (rng.random(n) < 0.4).astype(float)
        data = Dataset(y=y, X=np.zeros((n, 0)), groups=g)
        spec = GlmmSpec(ModelFamily.logistic(), p=0,
                        groups=(GroupSpec(L, SpatialExponential(coords)),))
        prior = R2D2Prior(R2PriorSpec(1, 1), gbp=GbpParams(1.3, 0.6, 0.8, 1.9))
        cfg = McmcConfig(iters=1_200, burn_in=600, seed=3)
        s = run_chain(build_model(spec, prior, data), cfg)
        dmax = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1)).max()
        assert np.all((s.rho > 0) & (s.rho < 2 * dmax))
        # every retained rho admits a Cholesky factor of its correlation
        D = np.sqrt(((coords[:, None] - coords[None]) ** 2).sum(-1))
        for r in s.rho[::100]:
            C = np.exp(-D / r)
            np.linalg.cholesky(C)
            assert np.all(np.diag(C) == 1.0)


class TestVarianceConcentration:
    def test_sample_variance_of_eta_tightens_with_p(self):
        # orthonormalized design, phi_j = 1/p: V(eta) = |beta|^2 ~ (W/p) chi2_p,
        # so Var{V(eta)} scales as 2 W^2 / p
        rng = np.random.default_rng(14)
        n, W, reps = 400, 1.3, 60_000
        out = {}
        for p in (50, 200):
            Z = rng.standard_normal((n, p))
            Q, _ = np.linalg.qr(Z - Z.mean(0))
            X = Q[:, :p] * math.sqrt(n - 1)
            v = np.empty(reps)
            for i in range(0, reps, 6000):
                eta = rng.normal(0.0, math.sqrt(W / p), (6000, p)) @ X.T
                v[i:i + 6000] = eta.var(axis=1, ddof=1)
            out[p] = float(np.var(v, ddof=1))
        ratio = out[200] / out[50]
        assert ratio < 0.25
        assert 0.18 < ratio < 0.32


class TestEss:
    def test_white_noise(self, rng):
        x = rng.standard_normal(4000)
        assert 0.8 * 4000 < ess(x) < 1.2 * 4000

    def test_ar1(self, rng):
        rho, n = 0.9, 200_000
        x = np.empty(n)
        x[0] = rng.standard_normal()
        eps = rng.standard_normal(n)
        for i in range(1, n):
            x[i] = rho * x[i - 1] + eps[i]
        expect = n * (1 - rho) / (1 + rho)
        assert abs(ess(x) - expect) / expect < 0.30

    def test_degenerate(self):
        assert math.isnan(ess(np.ones(500)))

    def test_rates_per_second(self, rng):
        data = toy_gaussian(rng)
        spec = GlmmSpec(ModelFamily.gaussian(1.0), p=2, groups=())
        cfg = McmcConfig(iters=600, burn_in=100, seed=1)
        s = run_chain(build_model(spec, VaguePrior(), data), cfg)
        rates = effective_samples_per_second(s)
        assert set(rates) == set(s.columns())
        assert rates["beta0"] > 0


class TestComparatorPriors:
    def test_pc_and_vague_gaussian(self, rng):
        L = 6
        g = np.repeat(np.arange(L), 8)[:, None]
        u = rng.normal(0, 0.5, L)
        y = 0.3 + u[g[:, 0]] + rng.normal(0, 0.5, len(g))
        data = Dataset(y=y, X=np.zeros((len(g), 0)), groups=g)
        spec = GlmmSpec(ModelFamily.gaussian(1.0), p=0, groups=(GroupSpec(L),))
        for prior in (VaguePrior(), PCPrior()):
            s = run_chain(build_model(spec, prior, data),
                          McmcConfig(iters=1_500, burn_in=500, seed=4))
            assert np.all(s.sigma2_u > 0)
            assert np.all(np.isfinite(s.r2n))

    def test_horseshoe_logistic(self, rng):
        n, p = 50, 8
        X = rng.standard_normal((n, p))
        y = (rng.random(n) < 0.5).astype(float)
        data = Dataset(y=y, X=(X - X.mean(0)) / X.std(0, ddof=1), groups=np.zeros((n, 0)))
        spec = GlmmSpec(ModelFamily.logistic(), p=p, groups=())
        s = run_chain(build_model(spec, HorseshoePrior(), data),
                      McmcConfig(iters=1_500, burn_in=500, seed=9))
        assert s.beta.shape == (1000, p)
        assert np.all(np.isfinite(s.beta))

    def test_horseshoe_gaussian_scales_move(self, rng):
        # the local/global scales must keep updating on the conjugate path
        data = toy_gaussian(rng)
        spec = GlmmSpec(ModelFamily.gaussian(1.0), p=2, groups=())
        s = run_chain(build_model(spec, HorseshoePrior(), data),
                      McmcConfig(iters=1_200, burn_in=400, seed=13))
        assert "hs_z" in s.acceptance and "hs_tau" in s.acceptance
        assert np.all(np.isfinite(s.beta))
        assert s.beta[:, 0].std() > 0


class TestOtherFamilies:
    @pytest.mark.parametrize("fam,make_y", [
        (ModelFamily.neg_binomial(2.0), lambda rng, lam: rng.negative_binomial(lam, 0.5)),
        (ModelFamily.zero_inflated_poisson(0.3),
         lambda rng, lam: rng.poisson(lam) * (rng.random(len(lam)) > 0.3)),
        (ModelFamily.weibull(1.5), lambda rng, lam: rng.weibull(1.5, len(lam)) * lam),
    ])
    def test_dispersion_families_run(self, rng, fam, make_y):
        n = 40
        lam = np.exp(rng.normal(0.3, 0.4, n))
        y = np.maximum(np.asarray(make_y(rng, lam), dtype=float), 1e-3 if fam.kind == "weibull" else 0.0)
        data = Dataset(y=y, X=rng.standard_normal((n, 1)), groups=np.zeros((n, 0)))
        spec = GlmmSpec(fam, p=1, groups=())
        prior = R2D2Prior(R2PriorSpec(1, 1), gbp=GbpParams(0.6, 1.8, 1.5, 1.0))
        s = run_chain(build_model(spec, prior, data),
                      McmcConfig(iters=800, burn_in=400, seed=2))
        assert np.all(np.isfinite(s.theta))
        assert np.all(s.theta > (1.0 if fam.kind == "neg-binomial" else 0.0))

    def test_offset_family_runs(self, rng):
        n = 50
        off = rng.normal(0, 0.7, n)
        off -= off.mean()
        y = rng.poisson(np.exp(off + 0.4)).astype(float)
        data = Dataset(y=y, X=np.zeros((n, 0)), groups=rng.integers(0, 4, (n, 1)),
                       offsets=off, offset_log_variance=float(np.var(off, ddof=1)))
        fam = ModelFamily.poisson_offset(float(np.var(off, ddof=1)))
        spec = GlmmSpec(fam, p=0, groups=(GroupSpec(4),), offsets=off)
        prior = R2D2Prior(R2PriorSpec(1, 1), gbp=GbpParams(0.6, 1.8, 1.5, 1.0))
        s = run_chain(build_model(spec, prior, data),
                      McmcConfig(iters=800, burn_in=400, seed=6))
        assert np.all(np.isfinite(s.r2n))
