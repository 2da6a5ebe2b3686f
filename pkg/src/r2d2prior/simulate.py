"""Simulation studies: generators, metrics and the replication driver.

Three study designs are reproduced at desk scale: Gaussian two-way random
effects, Poisson mixed effects with an AR(1) design, and sparse
high-dimensional logistic regression. Each replicate regenerates data,
refits the working prior (the GBP fit for non-Gaussian responses), runs the
chain and scores it against the generator's realized truth.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, gammaln

from ._util import as_generator
from .approx import QmcConfig
from .dataio import Dataset, standardize_columns
from .errors import ChainDiverged, StudyFailed
from .families import ModelFamily, R2PriorSpec, mean_fn, r2_bounds, var_fn
from .gbpfit import FitConfig, estimate_beta0, fit_gbp
from .mcmc import (
    SHARED_BLOCK,
    GlmmSpec,
    GroupSpec,
    HorseshoePrior,
    McmcConfig,
    PCPrior,
    R2D2Prior,
    VaguePrior,
    build_model,
    run_chain,
)

GAUSSIAN_RE = "gaussian-re"
POISSON_MIXED = "poisson-mixed"
LOGISTIC_SPARSE = "logistic-sparse"

STUDIES = (GAUSSIAN_RE, POISSON_MIXED, LOGISTIC_SPARSE)


@dataclass
class Truth:
    """Realized generator state for one replicate."""

    beta0: float
    beta: np.ndarray
    u: list
    eta: np.ndarray
    r2n: np.ndarray | float
    sigma2: float | None = None
    sigma2_u: tuple = ()
    r2_population: float | None = None


@dataclass(frozen=True)
class StudyConfig:
    study: str
    reps: int = 50
    priors: tuple = ()          # (label, prior) pairs; default per study
    mcmc: McmcConfig = field(default_factory=McmcConfig)
    holdout_n: int = 1000
    seed: int = 0
    fit_config: FitConfig = field(default_factory=lambda: FitConfig(
        quad_points=255, qmc=QmcConfig(K=2000)))

    def __post_init__(self):
        if self.study not in STUDIES:
            raise ValueError(f"unknown study {self.study!r}")
        if self.reps < 1:
            raise ValueError("reps must be >= 1")


@dataclass
class MetricsRow:
    prior: str
    r2n_bias: float
    r2n_mse: float
    predictive: float            # y_mse, log_score or auc depending on study
    predictive_name: str
    beta_l2: float | None
    sigma2_u_mse: tuple = ()


def _r2n_plugin(family: ModelFamily, eta: np.ndarray, sigma2: float | None = None) -> float:
    """Sample R-squared at the realized linear predictors."""
    if family.kind == "location-scale":
        v = float(np.var(eta, ddof=1))
        return v / (v + sigma2)
    mu = mean_fn(family, eta)
    v = float(np.var(mu, ddof=1))
    return v / (v + float(np.mean(var_fn(family, eta))))


def _ar1_chol(p: int, rho: float = 0.8) -> np.ndarray:
    idx = np.arange(p)
    cov = rho ** np.abs(idx[:, None] - idx[None, :])
    return np.linalg.cholesky(cov)


def gen_gaussian_re(seed) -> tuple[Dataset, Truth]:
    """Two-way non-interacting random effects on a 10 x 10 grid:
    sigma2_u1 = 0.15, sigma2_u2 = 0.10, sigma2 = 0.25, beta0 = 1."""
    rng = as_generator(seed)
    L = 10
    u1 = rng.normal(0.0, math.sqrt(0.15), L)
    u2 = rng.normal(0.0, math.sqrt(0.10), L)
    g1, g2 = np.meshgrid(np.arange(L), np.arange(L), indexing="ij")
    g1, g2 = g1.ravel(), g2.ravel()
    eta = 1.0 + u1[g1] + u2[g2]
    y = eta + rng.normal(0.0, math.sqrt(0.25), L * L)
    data = Dataset(y=y, X=np.zeros((L * L, 0)), groups=np.column_stack([g1, g2]))
    fam = ModelFamily.gaussian(0.25)
    truth = Truth(beta0=1.0, beta=np.zeros(0), u=[u1, u2], eta=eta,
                  r2n=_r2n_plugin(fam, eta, 0.25), sigma2=0.25,
                  sigma2_u=(0.15, 0.10), r2_population=0.25 / 0.50)
    return data, truth


def gen_poisson_mixed(seed) -> tuple[Dataset, Truth]:
    """p = 5 AR(1) covariates, beta_j ~ N(0, 0.1), beta0 = 0.25, one random
    effect with 20 levels (sigma2_u = 0.5) and 5 replicates per level."""
    rng = as_generator(seed)
    Lv, m, p = 20, 5, 5
    n = Lv * m
    X = rng.standard_normal((n, p)) @ _ar1_chol(p).T
    beta = rng.normal(0.0, math.sqrt(0.1), p)
    u = rng.normal(0.0, math.sqrt(0.5), Lv)
    g = np.repeat(np.arange(Lv), m)
    eta = 0.25 + X @ beta + u[g]
    y = rng.poisson(np.exp(eta)).astype(float)
    data = Dataset(y=y, X=X, groups=g[:, None])
    fam = ModelFamily.poisson()
    truth = Truth(beta0=0.25, beta=beta, u=[u], eta=eta,
                  r2n=_r2n_plugin(fam, eta), sigma2_u=(0.5,))
    return data, truth


def gen_logistic_sparse(seed) -> tuple[Dataset, Truth]:
    """n = 60, p = 50 AR(1) design; five N(0, 1) signals centered in the
    coefficient vector, beta0 = 0.5."""
    rng = as_generator(seed)
    n, p, k = 60, 50, 5
    X = rng.standard_normal((n, p)) @ _ar1_chol(p).T
    beta = np.zeros(p)
    start = (p - k) // 2
    beta[start:start + k] = rng.normal(0.0, 1.0, k)
    eta = 0.5 + X @ beta
    y = (rng.random(n) < expit(eta)).astype(float)
    data = Dataset(y=y, X=X, groups=np.zeros((n, 0)))
    fam = ModelFamily.logistic()
    truth = Truth(beta0=0.5, beta=beta, u=[], eta=eta, r2n=_r2n_plugin(fam, eta))
    return data, truth


_GENERATORS = {GAUSSIAN_RE: gen_gaussian_re,
               POISSON_MIXED: gen_poisson_mixed,
               LOGISTIC_SPARSE: gen_logistic_sparse}


def generate(study: str, seed) -> tuple[Dataset, Truth]:
    return _GENERATORS[study](seed)


def default_priors(study: str) -> tuple:
    """The prior lineup of the corresponding results table."""
    if study == GAUSSIAN_RE:
        return (("vague", VaguePrior()), ("pc", PCPrior()),
                ("beta(1,4)", R2D2Prior(R2PriorSpec(1, 4))),
                ("beta(1,1)", R2D2Prior(R2PriorSpec(1, 1))),
                ("beta(4,1)", R2D2Prior(R2PriorSpec(4, 1))))
    if study == POISSON_MIXED:
        return (("vague", VaguePrior()), ("pc", PCPrior()),
                ("beta(1,4)", R2D2Prior(R2PriorSpec(1, 4))),
                ("beta(1,1)", R2D2Prior(R2PriorSpec(1, 1))),
                ("beta(4,1)", R2D2Prior(R2PriorSpec(4, 1))))
    return (("vague", VaguePrior()), ("horseshoe", HorseshoePrior()),
            ("beta(1,4)", R2D2Prior(R2PriorSpec(1, 4))),
            ("beta(1,1)", R2D2Prior(R2PriorSpec(1, 1))),
            ("beta(4,1)", R2D2Prior(R2PriorSpec(4, 1))))


def _study_family(study: str) -> ModelFamily:
    return {GAUSSIAN_RE: ModelFamily.gaussian(1.0),
            POISSON_MIXED: ModelFamily.poisson(),
            LOGISTIC_SPARSE: ModelFamily.logistic()}[study]


def _study_spec(study: str, data: Dataset) -> GlmmSpec:
    if study == GAUSSIAN_RE:
        return GlmmSpec(_study_family(study), p=0,
                        groups=(GroupSpec(10), GroupSpec(10)))
    if study == POISSON_MIXED:
        return GlmmSpec(_study_family(study), p=5, groups=(GroupSpec(20),),
                        effect_grouping=SHARED_BLOCK)
    return GlmmSpec(_study_family(study), p=50, groups=())


def _prepare_prior(study: str, prior, data: Dataset, fit_cfg: FitConfig):
    """Fill in the per-replicate GBP fit for non-Gaussian R2D2 priors."""
    if not isinstance(prior, R2D2Prior) or study == GAUSSIAN_RE:
        return prior
    fam = _study_family(study)
    b0_hat = estimate_beta0(data.y, fam)
    lo, hi = r2_bounds(fam, b0_hat)
    spec = R2PriorSpec(prior.spec.a, prior.spec.b, lo, hi)
    res = fit_gbp(fam, b0_hat, spec, fit_cfg)
    return replace(prior, gbp=res.params)


def _holdout(study: str, truth: Truth, n_holdout: int, rng) -> tuple:
    """(design info, responses) drawn from the same realized truth."""
    if study == GAUSSIAN_RE:
        g1 = rng.integers(0, 10, n_holdout)
        g2 = rng.integers(0, 10, n_holdout)
        eta = truth.beta0 + truth.u[0][g1] + truth.u[1][g2]
        y = eta + rng.normal(0.0, math.sqrt(truth.sigma2), n_holdout)
        return (None, np.column_stack([g1, g2])), y
    if study == POISSON_MIXED:
        X = rng.standard_normal((n_holdout, 5)) @ _ar1_chol(5).T
        g = rng.integers(0, 20, n_holdout)
        eta = truth.beta0 + X @ truth.beta + truth.u[0][g]
        y = rng.poisson(np.exp(eta)).astype(float)
        return (X, g[:, None]), y
    X = rng.standard_normal((n_holdout, 50)) @ _ar1_chol(50).T
    eta = truth.beta0 + X @ truth.beta
    y = (rng.random(n_holdout) < expit(eta)).astype(float)
    return (X, None), y


def _auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-statistic area under the ROC curve."""
    pos = scores[labels > 0.5]
    neg = scores[labels <= 0.5]
    if len(pos) == 0 or len(neg) == 0:
        return math.nan
    from scipy.stats import rankdata
    ranks = rankdata(np.concatenate([pos, neg]))
    return float((ranks[:len(pos)].sum() - len(pos) * (len(pos) + 1) / 2)
                 / (len(pos) * len(neg)))


def metrics(study: str, samples, truth: Truth, holdout, data: Dataset) -> MetricsRow:
    """Score one fitted replicate against the realized truth."""
    (X_h, g_h), y_h = holdout
    beta0_hat = float(samples.beta0.mean())
    # posterior-mean coefficients, mapped back to the generator scale
    if samples.beta.shape[1]:
        beta_std = samples.beta.mean(axis=0)
        beta_hat = beta_std / data.x_scale
        beta0_hat_raw = beta0_hat - float(beta_std @ (data.x_center / data.x_scale))
    else:
        beta_hat = np.zeros(0)
        beta0_hat_raw = beta0_hat
    u_hat = [uk.mean(axis=0) for uk in samples.u]

    r2_hat = float(samples.r2n.mean())
    r2_bias = r2_hat - float(truth.r2n)
    r2_mse = (r2_hat - float(truth.r2n)) ** 2

    eta_h = np.full(len(y_h), beta0_hat_raw)
    if X_h is not None and len(beta_hat):
        eta_h = eta_h + X_h @ beta_hat
    if g_h is not None:
        for k in range(g_h.shape[1]):
            eta_h = eta_h + u_hat[k][g_h[:, k]]

    if study == GAUSSIAN_RE:
        pred = float(np.mean((y_h - eta_h) ** 2))
        pred_name = "y_mse"
    elif study == POISSON_MIXED:
        lam = np.exp(eta_h)
        pred = float(np.mean(y_h * np.log(lam) - lam - gammaln(y_h + 1)))
        pred_name = "log_score"
    else:
        pred = _auc(eta_h, y_h)
        pred_name = "auc"

    beta_l2 = None
    if len(truth.beta):
        beta_l2 = float(np.sum((beta_hat - truth.beta) ** 2) / len(truth.beta))

    s2u_mse = ()
    if truth.sigma2_u and samples.sigma2_u is not None:
        est = samples.sigma2_u.mean(axis=0)
        s2u_mse = tuple((float(est[k]) - tv) ** 2 for k, tv in enumerate(truth.sigma2_u))

    return MetricsRow(prior="", r2n_bias=r2_bias, r2n_mse=r2_mse,
                      predictive=pred, predictive_name=pred_name,
                      beta_l2=beta_l2, sigma2_u_mse=s2u_mse)


def _run_replicate(args):
    study, rep_seed, priors, mcmc_cfg, holdout_n, fit_cfg = args
    ss = np.random.SeedSequence(rep_seed)
    gen_seed, holdout_seed, *chain_seeds = ss.spawn(2 + len(priors))
    data, truth = generate(study, as_generator(gen_seed))
    # standardize covariates the way an analysis would
    if data.p:
        Xs, center, scale = standardize_columns(data.X)
        data = Dataset(y=data.y, X=Xs, groups=data.groups, x_center=center,
                       x_scale=scale)
    holdout = _holdout(study, truth, holdout_n, as_generator(holdout_seed))
    spec = _study_spec(study, data)
    rows = []
    for (label, prior), cseed in zip(priors, chain_seeds):
        prepared = _prepare_prior(study, prior, data, fit_cfg)
        model = build_model(spec, prepared, data)
        cfg = replace(mcmc_cfg, seed=cseed)
        samples = run_chain(model, cfg)
        row = metrics(study, samples, truth, holdout, data)
        row.prior = label
        rows.append(row)
    return rows


def run_study(cfg: StudyConfig):
    """Replicate loop; returns (table rows, per-replicate failures).

    The table has one entry per (prior, metric) with mean, standard error
    (NaN when reps == 1) and the replicate count. Replicates run in
    parallel when R2D2_THREADS > 1.
    """
    priors = cfg.priors or default_priors(cfg.study)
    rep_seeds = [int(s.generate_state(1)[0]) for s in
                 np.random.SeedSequence(cfg.seed).spawn(cfg.reps)]
    tasks = [(cfg.study, s, tuple(priors), cfg.mcmc, cfg.holdout_n, cfg.fit_config)
             for s in rep_seeds]
    threads = int(os.environ.get("R2D2_THREADS", "1"))
    results = []
    failures = []
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futs = list(pool.map(_run_replicate_safe, tasks))
        for res in futs:
            (results if not isinstance(res, Exception) else failures).append(res)
    else:
        for task in tasks:
            try:
                results.append(_run_replicate(task))
            except ChainDiverged as exc:
                failures.append(exc)
    if len(failures) > 0.1 * cfg.reps:
        raise StudyFailed(f"{len(failures)} of {cfg.reps} replicates failed")

    table = {}
    for rep_rows in results:
        for row in rep_rows:
            metrics_of = {"r2n_bias": row.r2n_bias, "r2n_mse": row.r2n_mse,
                          row.predictive_name: row.predictive}
            if row.beta_l2 is not None:
                metrics_of["beta_l2"] = row.beta_l2
            for k, v in enumerate(row.sigma2_u_mse):
                metrics_of[f"sigma2_u{k + 1}_mse"] = v
            for name, value in metrics_of.items():
                table.setdefault((row.prior, name), []).append(value)

    rows = []
    for (prior, name), values in table.items():
        vals = np.asarray(values, dtype=float)
        se = float(vals.std(ddof=1) / math.sqrt(len(vals))) if len(vals) > 1 else math.nan
        rows.append({"prior": prior, "metric": name, "mean": float(vals.mean()),
                     "se": se, "reps": len(vals)})
    return rows, failures


def _run_replicate_safe(task):
    try:
        return _run_replicate(task)
    except ChainDiverged as exc:
        return exc


def study_rows_to_csv(rows, path):
    import pandas as pd
    pd.DataFrame(rows, columns=["prior", "metric", "mean", "se", "reps"]).to_csv(
        path, index=False)
