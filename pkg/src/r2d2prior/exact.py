"""Closed-form induced priors on the global variance W.

For the six families with an exact R-squared map, a Beta(a, b, r2_min, r2_max)
prior on R-squared induces a density on W by change of variables:

    pi(w) = beta4_pdf(R2(w)) * dR2/dw

Densities are assembled in log space from stable per-family pieces so that
large w and a + b up to 8 cannot overflow. Sampling inverts the monotone map:
closed form for the location-scale family, bracketed bisection elsewhere.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import betaln

from ._util import as_generator, log_expm1
from .distributions import beta4_sample
from .errors import NumericFailure, UnsupportedFamily
from .families import (
    LOCATION_SCALE,
    LOGISTIC,
    NEG_BINOMIAL,
    POISSON,
    POISSON_OFFSET,
    WEIBULL,
    ZIP,
    ModelFamily,
    R2PriorSpec,
    log_r2_grad,
    r2_bounds,
    r2_exact,
    weibull_r2_max,
)

_BOUNDS_TOL = 1e-9
_BRACKET_MAX = 700.0


@dataclass(frozen=True)
class InducedPrior:
    """Exact induced prior of W for one family at a given intercept.

    The R-squared spec must carry exactly the bounds the family imposes;
    construction rejects anything else. Use `from_beta` to fill them in.
    """

    family: ModelFamily
    beta0: float
    spec: R2PriorSpec

    def __post_init__(self):
        if self.family.kind == LOGISTIC:
            raise UnsupportedFamily("logistic has no exact induced prior")
        lo, hi = r2_bounds(self.family, self.beta0)
        if abs(self.spec.r2_min - lo) > _BOUNDS_TOL or abs(self.spec.r2_max - hi) > _BOUNDS_TOL:
            raise ValueError(
                f"spec bounds ({self.spec.r2_min}, {self.spec.r2_max}) do not match "
                f"the family's R2 support ({lo}, {hi})"
            )

    @classmethod
    def from_beta(cls, family: ModelFamily, beta0: float, a: float, b: float) -> "InducedPrior":
        lo, hi = r2_bounds(family, beta0)
        return cls(family, beta0, R2PriorSpec(a, b, lo, hi))


def _log_parts(family: ModelFamily, beta0: float, w):
    """(log(R2 - m), log(M - R2), log dR2/dw, log(M - m)) for w >= 0."""
    k, th = family.kind, family.theta
    w = np.asarray(w, dtype=float)
    log3 = math.log(3.0)
    with np.errstate(divide="ignore"):
        if k == LOCATION_SCALE:
            ld = np.log(w + th)
            return np.log(w) - ld, math.log(th) - ld, math.log(th) - 2.0 * ld, 0.0
        if k == POISSON:
            lu = log_expm1(w)
            lv = -beta0 - 0.5 * w
            ld = np.logaddexp(lu, lv)
            lg = lv + log_expm1(w + log3) - math.log(2.0) - 2.0 * ld
            return lu - ld, lv - ld, lg, 0.0
        if k == NEG_BINOMIAL:
            lu = log_expm1(w)
            lv = math.log(th) - beta0 - 0.5 * w
            ld = np.logaddexp(lu, lv)
            lg = lv + log_expm1(w + log3) - math.log(2.0) - 2.0 * ld
            return lu - ld, lv - ld, lg, 0.0
        if k == POISSON_OFFSET:
            lt = math.log(th)
            lu = log_expm1(w + lt)
            lv = -0.5 * lt - beta0 - 0.5 * w
            ld = np.logaddexp(lu, lv)
            lu0 = math.log(th - 1.0) if th > 1.0 else -math.inf
            lv0 = -0.5 * lt - beta0
            ld0 = np.logaddexp(lu0, lv0)
            # R2 - m = (u v0 - u0 v) / ((u+v)(u0+v0)); the numerator reduces to
            # v0 e^{-w/2} { e^{w/2}(theta e^w - 1) - (theta - 1) }
            la = 0.5 * w + lu
            lnum = lv0 - 0.5 * w + la + np.log1p(-np.exp(lu0 - la))
            lg = lv + log_expm1(w + log3 + lt) - math.log(2.0) - 2.0 * ld
            return lnum - ld - ld0, lv - ld, lg, lv0 - ld0
        if k == ZIP:
            la1 = math.log1p(-th)
            lth = math.log(th) if th > 0 else -math.inf
            lu = log_expm1(w)
            lv = -beta0 - 0.5 * w
            ld = np.logaddexp(np.logaddexp(lu, lv), lth)
            # M - R2 = (1-theta)(v + theta)/D
            lg = la1 + np.logaddexp(lv + log_expm1(w + log3) - math.log(2.0), lth + w) - 2.0 * ld
            return la1 + lu - ld, la1 + np.logaddexp(lv, lth) - ld, lg, la1
        if k == WEIBULL:
            r = weibull_r2_max(th)
            lr = math.log(r)
            lxr = w + np.log1p(-r * np.exp(-w))  # log(e^w - r)
            lg = lr + math.log1p(-r) + w - 2.0 * lxr
            return lr + log_expm1(w) - lxr, lr + math.log1p(-r) - lxr, lg, lr
    raise UnsupportedFamily(k)


def induced_logpdf(prior: InducedPrior, w):
    """log pi(w) of the induced prior."""
    w = np.asarray(w, dtype=float)
    if np.any(w < 0):
        raise ValueError("w must be nonnegative")
    a, b = prior.spec.a, prior.spec.b
    lp1, lp2, lg, lrange = _log_parts(prior.family, prior.beta0, w)
    t1 = (a - 1.0) * lp1 if a != 1.0 else 0.0
    t2 = (b - 1.0) * lp2 if b != 1.0 else 0.0
    out = t1 + t2 + lg - (a + b - 1.0) * lrange - betaln(a, b)
    out = np.asarray(out)
    return out if out.ndim else float(out)


def induced_pdf(prior: InducedPrior, w):
    """pi(w); returns +inf at w = 0 when a < 1, matching the origin limit."""
    out = np.exp(induced_logpdf(prior, w))
    return out if np.ndim(out) else float(out)


def origin_limit(prior: InducedPrior):
    """lim_{w -> 0} pi(w): +inf if a < 1, 0 if a > 1, and the family's
    constant b/(M - m) * dR2/dw(0) at a = 1."""
    a, b = prior.spec.a, prior.spec.b
    if a < 1.0:
        return math.inf
    if a > 1.0:
        return 0.0
    m, M = prior.spec.r2_min, prior.spec.r2_max
    grad0 = float(np.exp(log_r2_grad(prior.family, prior.beta0, 0.0)))
    return b / (M - m) * grad0


def induced_sample(prior: InducedPrior, n: int, seed=None):
    """Draw W by sampling R2 ~ Beta4 and inverting the exact map.

    Location-scale inverts in closed form (W = sigma2 * R2/(1 - R2)); the
    other families use bracket doubling plus bisection to 1e-12 relative
    tolerance, which the strictly monotone map makes safe.
    """
    rng = as_generator(seed)
    r = beta4_sample(n, prior.spec, rng)
    fam, b0 = prior.family, prior.beta0
    if fam.kind == LOCATION_SCALE:
        return fam.theta * r / (1.0 - r)

    lo = np.zeros(n)
    hi = np.ones(n)
    pending = r2_exact(fam, b0, hi) < r
    while np.any(pending):
        hi[pending] *= 2.0
        if np.any(hi > _BRACKET_MAX):
            raise NumericFailure(
                f"bisection bracket exceeded W = {_BRACKET_MAX}; "
                "target R2 too close to its upper bound"
            )
        pending = r2_exact(fam, b0, hi) < r
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        high = r2_exact(fam, b0, mid) >= r
        hi = np.where(high, mid, hi)
        lo = np.where(high, lo, mid)
        if np.max((hi - lo) / np.maximum(hi, 1e-300)) < 1e-12:
            break
    return 0.5 * (lo + hi)
