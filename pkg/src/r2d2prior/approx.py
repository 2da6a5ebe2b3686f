"""Quantile-grid (QMC) and first-order approximations of the R-squared map.

The moments E{mu(eta)^m} and E{sigma2(eta)} are approximated by averaging
over the i/K quantiles of the linear-predictor law (standard normal shifted
by beta0 and scaled by sqrt(W), or an empirical mixture of normals when the
design rows are supplied). For exponential-mean families the plain grid
average truncates the upper tail badly at large W (most of E{mu^2} can sit
beyond the last quantile), so by default the grid is completed with
deterministic tail cells weighted by the source law's own tail mass; set
``tail_completion=False`` for the plain equal-weight average. The induced
density follows by a numerical derivative of the approximate map.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .distributions import beta4_logpdf
from .errors import DegenerateModel, FlatLink
from .families import (
    NEG_BINOMIAL,
    POISSON,
    POISSON_OFFSET,
    WEIBULL,
    ZIP,
    LinearPredictorLaw,
    ModelFamily,
    R2PriorSpec,
    _weibull_log_gammas,
    eta_variance,
    mean_fn,
    mean_prime,
    var_fn,
)

logger = logging.getLogger(__name__)

_EXP_MEAN_KINDS = (POISSON, POISSON_OFFSET, NEG_BINOMIAL, ZIP, WEIBULL)
# Wing completion: the quantile grid keeps the central mass, while everything
# beyond the p = _WING_PROB quantiles is covered by uniform-z cells of width
# _WING_STEP (in sd units) out to _WING_REACH sd, each weighted by its own
# Gaussian mass. Exponential links put most of E{mu^2} out there at large W.
_WING_PROB = 0.01
_WING_STEP = 0.01
_WING_REACH = 40.0


@dataclass(frozen=True)
class QmcConfig:
    """Quantile-grid settings.

    K - 1 nodes at the i/K quantiles (or K midpoint nodes at (i - 1/2)/K),
    tail completion on by default, and the relative step of the central
    difference used for the density.
    """

    K: int = 10_000
    fd_step_scale: float = 1e-4
    midpoint: bool = False
    tail_completion: bool = True

    def __post_init__(self):
        if self.K < 2:
            raise ValueError("K must be at least 2")
        if self.fd_step_scale <= 0:
            raise ValueError("fd_step_scale must be positive")

    def probs(self) -> np.ndarray:
        if self.midpoint:
            return (np.arange(1, self.K + 1) - 0.5) / self.K
        return np.arange(1, self.K) / self.K


# Smaller default grid for use inside optimization loops.
FIT_QMC = QmcConfig(K=1_000)

_wing_offsets = np.arange(_WING_STEP, _WING_REACH + _WING_STEP, _WING_STEP)


def _completed_z_grid(probs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Standard-normal nodes and weights: quantile core plus wing cells.

    Quantile nodes inside [_WING_PROB, 1 - _WING_PROB] keep equal weights on
    the core mass; each wing is partitioned into uniform-z cells carrying
    their exact Gaussian mass, with midpoint nodes. Weights sum to one.
    """
    core = probs[(probs >= _WING_PROB) & (probs <= 1.0 - _WING_PROB)]
    if len(core) == 0:
        core = probs[len(probs) // 2:len(probs) // 2 + 1]
    z = ndtri(core)
    base_w = np.full(len(z), (core[-1] - core[0]) / max(len(z) - 1, 1))
    z_hi = float(-ndtri(_WING_PROB))
    edges = z_hi + np.concatenate(([0.0], _wing_offsets))
    mass = np.diff(-ndtr(-edges))  # P(edge_j < Z <= edge_{j+1})
    mass[-1] += float(ndtr(-edges[-1]))
    nodes = 0.5 * (edges[:-1] + edges[1:])
    keep = mass > 0
    nodes, mass = nodes[keep], mass[keep]
    allz = np.concatenate([-nodes[::-1], z, nodes])
    weights = np.concatenate([mass[::-1], base_w, mass])
    return allz, weights / weights.sum()


@dataclass(frozen=True)
class EmpiricalMixture:
    """eta law averaged over the empirical distribution of the design rows.

    Each row contributes a Normal(beta0, W * s_i^2) component with
    s_i^2 = sum_j phi_j x_ij^2 + (random-effect share of phi).
    """

    rows: np.ndarray
    beta0: float
    W: float
    phi: np.ndarray

    def __post_init__(self):
        rows = np.atleast_2d(np.asarray(self.rows, dtype=float))
        phi = np.asarray(self.phi, dtype=float)
        if not np.all(np.isfinite(rows)):
            raise ValueError("design rows must be finite")
        if phi.ndim != 1 or phi.size < rows.shape[1]:
            raise ValueError("phi must cover at least the design columns")
        if np.any(phi < 0) or abs(phi.sum() - 1.0) > 1e-8:
            raise ValueError("phi must lie on the simplex")
        if self.W < 0:
            raise ValueError("W must be nonnegative")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "phi", phi)

    def component_scales(self) -> np.ndarray:
        p = self.rows.shape[1]
        rand_share = float(np.sum(self.phi[p:]))
        s2 = self.rows ** 2 @ self.phi[:p] + rand_share
        return np.sqrt(self.W * s2)

    def cdf(self, eta: np.ndarray) -> np.ndarray:
        scales = np.maximum(self.component_scales(), 1e-300)
        return ndtr((np.asarray(eta)[..., None] - self.beta0) / scales).mean(axis=-1)

    def quantiles(self, probs: np.ndarray) -> np.ndarray:
        scales = self.component_scales()
        smax = float(np.max(scales))
        if smax == 0.0:
            return np.full(len(probs), self.beta0)
        z = ndtri(probs)
        lo = np.full(len(probs), self.beta0 + z.min() * smax - 1.0)
        hi = np.full(len(probs), self.beta0 + z.max() * smax + 1.0)
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            above = self.cdf(mid) >= probs
            hi = np.where(above, mid, hi)
            lo = np.where(above, lo, mid)
        return 0.5 * (lo + hi)

    def nodes_and_weights(self, cfg: "QmcConfig") -> tuple[np.ndarray, np.ndarray]:
        probs = cfg.probs()
        smax = float(np.max(self.component_scales()))
        if not cfg.tail_completion or smax == 0.0:
            q = self.quantiles(probs)
            return q, np.full(len(q), 1.0 / len(q))
        core_p = probs[(probs >= _WING_PROB) & (probs <= 1.0 - _WING_PROB)]
        if len(core_p) == 0:
            core_p = probs[len(probs) // 2:len(probs) // 2 + 1]
        q = self.quantiles(core_p)
        base_w = np.full(len(q), (core_p[-1] - core_p[0]) / max(len(q) - 1, 1))
        hi_edges = self.quantiles(np.array([1.0 - _WING_PROB])) \
            + np.concatenate(([0.0], _wing_offsets * smax))
        lo_edges = self.quantiles(np.array([_WING_PROB])) \
            - np.concatenate(([0.0], _wing_offsets * smax))
        hi_cdf = self.cdf(hi_edges)
        lo_cdf = self.cdf(lo_edges)
        hi_mass = np.diff(hi_cdf)
        hi_mass[-1] += 1.0 - hi_cdf[-1]
        lo_mass = -np.diff(lo_cdf)
        lo_mass[-1] += lo_cdf[-1]
        hi_nodes = 0.5 * (hi_edges[:-1] + hi_edges[1:])
        lo_nodes = 0.5 * (lo_edges[:-1] + lo_edges[1:])
        keep_hi = hi_mass > 0
        keep_lo = lo_mass > 0
        nodes = np.concatenate([lo_nodes[keep_lo][::-1], q, hi_nodes[keep_hi]])
        weights = np.concatenate([lo_mass[keep_lo][::-1], base_w, hi_mass[keep_hi]])
        return nodes, weights / weights.sum()


QuantileSource = LinearPredictorLaw | EmpiricalMixture


def _source_nodes(family: ModelFamily, source: QuantileSource,
                  cfg: QmcConfig) -> tuple[np.ndarray, np.ndarray]:
    """(eta nodes, weights) for a quantile source."""
    if isinstance(source, LinearPredictorLaw):
        sd = math.sqrt(eta_variance(family, source.W))
        probs = cfg.probs()
        if cfg.tail_completion:
            z, wts = _completed_z_grid(probs)
        else:
            z, wts = ndtri(probs), np.full(len(probs), 1.0 / len(probs))
        return source.beta0 + sd * z, wts
    return source.nodes_and_weights(cfg)


def _r2_from_nodes(family: ModelFamily, eta: np.ndarray, wts: np.ndarray) -> tuple[float, float]:
    """(v, sigma2~) rescaled so exponential-mean families cannot overflow.

    Returns the pair on a common scale; R2 = v / (v + sigma2~).
    """
    k, th = family.kind, family.theta
    if eta.max() == eta.min():
        # degenerate law (W = 0): the mean variance is exactly zero
        return 0.0, float(var_fn(family, eta[:1])[0])
    if k in _EXP_MEAN_KINDS:
        s = float(np.max(eta))
        e1 = float(wts @ np.exp(eta - s))
        e2 = float(wts @ np.exp(2.0 * (eta - s)))
        t = math.exp(-s) if s > -700 else math.inf
        if k in (POISSON, POISSON_OFFSET):
            return e2 - e1 * e1, t * e1
        if k == NEG_BINOMIAL:
            return e2 - e1 * e1, th * t * e1
        if k == ZIP:
            a1 = 1.0 - th
            return a1 * a1 * (e2 - e1 * e1), a1 * (t * e1 + th * e2)
        lg1, lg2 = _weibull_log_gammas(th)
        g1sq = math.exp(2.0 * lg1)
        return g1sq * (e2 - e1 * e1), (math.exp(lg2) + g1sq) * e2
    mu = mean_fn(family, eta)
    m1 = float(wts @ mu)
    v = float(wts @ (mu * mu)) - m1 * m1
    return max(v, 0.0), float(wts @ var_fn(family, eta))


def qmc_moments(family: ModelFamily, source: QuantileSource, cfg: QmcConfig = QmcConfig()):
    """(mu1~, mu2~, sigma2~): weighted node averages of mu, mu^2 and sigma2."""
    eta, wts = _source_nodes(family, source, cfg)
    mu = mean_fn(family, eta)
    return float(wts @ mu), float(wts @ (mu * mu)), float(wts @ var_fn(family, eta))


def qmc_r2(family: ModelFamily, source: QuantileSource, cfg: QmcConfig = QmcConfig()) -> float:
    """Approximate R2 = var~ / (var~ + sigma2~) on the quantile grid."""
    eta, wts = _source_nodes(family, source, cfg)
    v, s2 = _r2_from_nodes(family, eta, wts)
    den = v + s2
    if den == 0.0:
        raise DegenerateModel("mean variance and noise variance are both zero")
    return min(max(v / den, 0.0), 1.0)


def qmc_r2_curve(family: ModelFamily, beta0: float, w,
                 cfg: QmcConfig = QmcConfig()) -> np.ndarray:
    """Vectorized qmc_r2 over a grid of W values (normal-law source)."""
    w = np.atleast_1d(np.asarray(w, dtype=float))
    probs = cfg.probs()
    if cfg.tail_completion:
        z, wts = _completed_z_grid(probs)
    else:
        z, wts = ndtri(probs), np.full(len(probs), 1.0 / len(probs))
    out = np.empty(len(w))
    step = max(1, int(2e6 / max(len(z), 1)))
    for i in range(0, len(w), step):
        eta = beta0 + np.sqrt(eta_variance(family, w[i:i + step]))[:, None] * z[None, :]
        if family.kind in _EXP_MEAN_KINDS or np.any(w[i:i + step] == 0.0):
            for j in range(eta.shape[0]):
                v, s2 = _r2_from_nodes(family, eta[j], wts)
                den = v + s2
                if den == 0.0:
                    raise DegenerateModel("mean variance and noise variance are both zero")
                out[i + j] = min(max(v / den, 0.0), 1.0)
        else:
            mu = mean_fn(family, eta)
            m1 = mu @ wts
            v = np.maximum((mu * mu) @ wts - m1 * m1, 0.0)
            s = var_fn(family, eta) @ wts
            den = v + s
            if np.any(den == 0.0):
                raise DegenerateModel("mean variance and noise variance are both zero")
            out[i:i + step] = np.clip(v / den, 0.0, 1.0)
    return out


def qmc_pdf(family: ModelFamily, beta0: float, spec: R2PriorSpec, cfg: QmcConfig, w):
    """Induced density via the approximate map and a central difference.

    The absolute value guards against a numerically non-monotone derivative;
    a warning is logged whenever the raw derivative comes out negative.
    """
    w = np.atleast_1d(np.asarray(w, dtype=float))
    if np.any(w < 0):
        raise ValueError("w must be nonnegative")
    h = cfg.fd_step_scale * np.maximum(w, 1.0)
    lo = np.maximum(w - h, 0.0)
    hi = w + h
    r_lo = qmc_r2_curve(family, beta0, lo, cfg)
    r_hi = qmc_r2_curve(family, beta0, hi, cfg)
    deriv = (r_hi - r_lo) / (hi - lo)
    if np.any(deriv < 0):
        logger.warning("qmc_pdf: negative raw derivative at %d of %d points",
                       int(np.sum(deriv < 0)), len(w))
    r = np.clip(qmc_r2_curve(family, beta0, w, cfg), spec.r2_min, spec.r2_max)
    out = np.exp(beta4_logpdf(r, spec)) * np.abs(deriv)
    return out if out.size > 1 else float(out[0])


def linear_s2(family: ModelFamily, beta0: float) -> float:
    """s2(beta0) = sigma2(beta0) / mu'(beta0)^2 of the first-order expansion.

    The induced prior under this approximation is GBP(a, b, 1, s2(beta0)).
    """
    mp = float(mean_prime(family, beta0))
    if mp == 0.0 or not math.isfinite(mp):
        raise FlatLink(f"mu'({beta0}) = {mp}")
    s2 = float(var_fn(family, beta0)) / mp ** 2
    if not math.isfinite(s2) or s2 <= 0.0:
        raise FlatLink(f"s2({beta0}) = {s2}")
    return s2
