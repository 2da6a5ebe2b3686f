"""Distributions the prior construction is made of.

Four-parameter beta on R-squared, the beta prime / generalized beta prime
(GBP) carrier on the global variance W, and the Dirichlet for the variance
split. Sampling uses gamma-ratio constructions driven by an explicit
numpy Generator so every stochastic path is reproducible from one seed.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc, betaincinv, betaln, expit, logit

from ._util import as_generator
from .errors import OutOfSupport
from .families import R2PriorSpec


@dataclass(frozen=True)
class GbpParams:
    """GBP(a, b, c, d): W = d * V^(1/c) with V ~ BP(a, b)."""

    a: float
    b: float
    c: float
    d: float

    def __post_init__(self):
        for name in ("a", "b", "c", "d"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"GBP parameter {name}={v} must be positive and finite")

    @property
    def has_mean(self) -> bool:
        """The mean exists iff b*c > 1."""
        return self.b * self.c > 1.0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.a, self.b, self.c, self.d)


@dataclass(frozen=True)
class DirichletSpec:
    """Concentration vector for the variance-decomposition simplex."""

    xi: tuple

    def __post_init__(self):
        xi = np.asarray(self.xi, dtype=float)
        if xi.ndim != 1 or xi.size == 0 or np.any(xi <= 0):
            raise ValueError("xi must be a nonempty vector of positive reals")
        object.__setattr__(self, "xi", tuple(float(x) for x in xi))


# ---------------------------------------------------------------------------
# four-parameter beta
# ---------------------------------------------------------------------------

def beta4_logpdf(r, spec: R2PriorSpec):
    a, b, m, M = spec.a, spec.b, spec.r2_min, spec.r2_max
    r = np.asarray(r, dtype=float)
    if np.any(r < m) or np.any(r > M):
        raise OutOfSupport(f"r outside [{m}, {M}]")
    with np.errstate(divide="ignore"):
        t1 = (a - 1.0) * np.log(r - m) if a != 1.0 else np.zeros_like(r)
        t2 = (b - 1.0) * np.log(M - r) if b != 1.0 else np.zeros_like(r)
    out = t1 + t2 - (a + b - 1.0) * math.log(M - m) - betaln(a, b)
    return out if out.ndim else float(out)


def beta4_pdf(r, spec: R2PriorSpec):
    out = np.exp(beta4_logpdf(r, spec))
    return out if np.ndim(out) else float(out)


def beta4_cdf(r, spec: R2PriorSpec):
    a, b, m, M = spec.a, spec.b, spec.r2_min, spec.r2_max
    r = np.asarray(r, dtype=float)
    z = np.clip((r - m) / (M - m), 0.0, 1.0)
    out = betainc(a, b, z)
    return out if out.ndim else float(out)


def beta4_sample(n: int, spec: R2PriorSpec, seed=None):
    """Gamma-ratio beta draws rescaled onto [r2_min, r2_max]."""
    rng = as_generator(seed)
    g1 = rng.standard_gamma(spec.a, size=n)
    g2 = rng.standard_gamma(spec.b, size=n)
    z = g1 / (g1 + g2)
    return spec.r2_min + (spec.r2_max - spec.r2_min) * z


# ---------------------------------------------------------------------------
# generalized beta prime
# ---------------------------------------------------------------------------

def gbp_logpdf(w, p: GbpParams):
    a, b, c, d = p.as_tuple()
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("w must be nonnegative")
    with np.errstate(divide="ignore"):
        lw = np.log(w) - math.log(d)
    # (a+b) * log(1 + (w/d)^c) without overflow for large w
    tail = (a + b) * np.logaddexp(0.0, c * lw)
    out = math.log(c) + (a * c - 1.0) * lw - tail - math.log(d) - betaln(a, b)
    return out if out.ndim else float(out)


def gbp_pdf(w, p: GbpParams):
    """Density of GBP(a,b,c,d); the w = 0 endpoint follows the ac trichotomy
    (+inf if ac < 1, c/(B(a,b) d) if ac = 1, 0 if ac > 1)."""
    w = np.asarray(w, dtype=float)
    with np.errstate(invalid="ignore"):
        out = np.exp(gbp_logpdf(w, p))
    at0 = w == 0.0
    if np.any(at0):
        ac = p.a * p.c
        if ac < 1.0:
            v0 = math.inf
        elif ac == 1.0:
            v0 = p.c / (math.exp(betaln(p.a, p.b)) * p.d)
        else:
            v0 = 0.0
        out = np.where(at0, v0, out)
    return out if out.ndim else float(out)


def gbp_cdf(w, p: GbpParams):
    a, b, c, d = p.as_tuple()
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("w must be nonnegative")
    with np.errstate(divide="ignore"):
        # r = t/(1+t) with t = (w/d)^c, computed as a sigmoid of log t
        r = expit(c * (np.log(w) - math.log(d)))
    out = betainc(a, b, r)
    return out if out.ndim else float(out)


def gbp_quantile(q, p: GbpParams):
    a, b, c, d = p.as_tuple()
    q = np.asarray(q, dtype=float)
    if np.any(q <= 0) or np.any(q >= 1):
        raise ValueError("q must be inside (0, 1)")
    r = betaincinv(a, b, q)
    out = d * np.exp(logit(r) / c)
    return out if out.ndim else float(out)


def gbp_sample(n: int, p: GbpParams, seed=None):
    """W = d * {R2/(1-R2)}^(1/c) for R2 ~ Beta(a, b) via the gamma ratio."""
    rng = as_generator(seed)
    g1 = rng.standard_gamma(p.a, size=n)
    g2 = rng.standard_gamma(p.b, size=n)
    return p.d * np.exp((np.log(g1) - np.log(g2)) / p.c)


def gbp_sqrt_law(p: GbpParams) -> GbpParams:
    """Prior of sqrt(W) when W ~ GBP(a, b, c, d): GBP(a, b, 2c, sqrt(d))."""
    return GbpParams(p.a, p.b, 2.0 * p.c, math.sqrt(p.d))


def gbp_mean(p: GbpParams) -> float:
    """E(W) = d B(a + 1/c, b - 1/c) / B(a, b); requires bc > 1."""
    if not p.has_mean:
        raise ValueError("GBP mean requires b*c > 1")
    a, b, c, d = p.as_tuple()
    return d * math.exp(betaln(a + 1.0 / c, b - 1.0 / c) - betaln(a, b))


# ---------------------------------------------------------------------------
# Dirichlet
# ---------------------------------------------------------------------------

def dirichlet_sample(spec: DirichletSpec | np.ndarray, seed=None, size=None):
    """Gamma-ratio Dirichlet draws on the simplex.

    Returns shape (len(xi),) or (size, len(xi)).
    """
    xi = np.asarray(spec.xi if isinstance(spec, DirichletSpec) else spec, dtype=float)
    if np.any(xi <= 0):
        raise ValueError("xi must be positive")
    rng = as_generator(seed)
    shape = (len(xi),) if size is None else (size, len(xi))
    g = rng.standard_gamma(xi, size=shape)
    return g / g.sum(axis=-1, keepdims=True)
