"""Likelihood families: mean/variance links and the population R-squared map.

Each family describes the response law through mu(eta) = E(Y|eta) and a noise
functional sigma2(eta), with eta the linear predictor. Under the working law
eta ~ Normal(beta0, W) the variance-decomposition R-squared

    R2(beta0, W) = Var{mu(eta)} / [ Var{mu(eta)} + E{sigma2(eta)} ]

has a closed form for every family except the logistic, which must go through
the quantile-grid approximation instead.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import expit, gammaln

from ._util import log_expm1
from .errors import LinkDomain, UnsupportedFamily

LOCATION_SCALE = "location-scale"
POISSON = "poisson"
POISSON_OFFSET = "poisson-offset"
NEG_BINOMIAL = "neg-binomial"
ZIP = "zero-inflated-poisson"
WEIBULL = "weibull"
LOGISTIC = "logistic"

KINDS = (LOCATION_SCALE, POISSON, POISSON_OFFSET, NEG_BINOMIAL, ZIP, WEIBULL, LOGISTIC)

# Kinds whose theta is required, with (low, high, low_inclusive) domains.
_THETA_DOMAIN = {
    LOCATION_SCALE: (0.0, math.inf, False),   # error variance sigma^2 > 0
    POISSON_OFFSET: (1.0, math.inf, True),    # theta = exp(offset log-variance) >= 1
    NEG_BINOMIAL: (1.0, math.inf, True),      # overdispersion; theta = 1 recovers Poisson
    ZIP: (0.0, 1.0, True),                    # zero-inflation probability in [0, 1)
    WEIBULL: (0.0, math.inf, False),          # shape > 0
}


@dataclass(frozen=True)
class ModelFamily:
    """Likelihood descriptor: kind plus the auxiliary parameter it needs."""

    kind: str
    theta: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown family kind {self.kind!r}")
        dom = _THETA_DOMAIN.get(self.kind)
        if dom is None:
            if self.theta is not None:
                raise ValueError(f"{self.kind} takes no theta")
        else:
            if self.theta is None:
                raise ValueError(f"{self.kind} requires theta")
            lo, hi, lo_inc = dom
            ok = (self.theta >= lo if lo_inc else self.theta > lo) and self.theta < hi
            if not ok or not math.isfinite(self.theta):
                raise ValueError(f"theta={self.theta} outside domain for {self.kind}")

    # -- constructors ------------------------------------------------------
    @classmethod
    def location_scale(cls, sigma2: float = 1.0) -> "ModelFamily":
        return cls(LOCATION_SCALE, float(sigma2))

    gaussian = location_scale

    @classmethod
    def poisson(cls) -> "ModelFamily":
        return cls(POISSON)

    @classmethod
    def poisson_offset(cls, offset_log_variance: float) -> "ModelFamily":
        """Offset model; stores theta = exp(sigma2_N), the form the R2 map uses."""
        if offset_log_variance < 0:
            raise ValueError("offset log-variance must be >= 0")
        return cls(POISSON_OFFSET, float(math.exp(offset_log_variance)))

    @classmethod
    def poisson_offset_theta(cls, theta: float) -> "ModelFamily":
        return cls(POISSON_OFFSET, float(theta))

    @classmethod
    def neg_binomial(cls, theta: float) -> "ModelFamily":
        return cls(NEG_BINOMIAL, float(theta))

    @classmethod
    def zero_inflated_poisson(cls, theta: float) -> "ModelFamily":
        return cls(ZIP, float(theta))

    @classmethod
    def weibull(cls, theta: float) -> "ModelFamily":
        return cls(WEIBULL, float(theta))

    @classmethod
    def logistic(cls) -> "ModelFamily":
        return cls(LOGISTIC)

    @property
    def has_exact_r2(self) -> bool:
        return self.kind != LOGISTIC


@dataclass(frozen=True)
class R2PriorSpec:
    """Four-parameter beta target Beta(a, b, r2_min, r2_max) on R-squared."""

    a: float
    b: float
    r2_min: float = 0.0
    r2_max: float = 1.0

    def __post_init__(self):
        if not (self.a > 0 and self.b > 0):
            raise ValueError("a and b must be positive")
        if not (0.0 <= self.r2_min < self.r2_max <= 1.0):
            raise ValueError("need 0 <= r2_min < r2_max <= 1")


@dataclass(frozen=True)
class LinearPredictorLaw:
    """Normal(beta0, W) working law of the linear predictor."""

    beta0: float
    W: float

    def __post_init__(self):
        if self.W < 0:
            raise ValueError("W must be nonnegative")


def _weibull_log_gammas(theta: float) -> tuple[float, float]:
    return gammaln(1.0 + 1.0 / theta), gammaln(1.0 + 2.0 / theta)


def weibull_r2_max(theta: float) -> float:
    """Upper bound r(theta) = 1 / {2 + Gamma(1+2/theta)/Gamma^2(1+1/theta)}.

    The gamma ratio is evaluated through log-gamma so small theta cannot
    overflow.
    """
    lg1, lg2 = _weibull_log_gammas(theta)
    return 1.0 / (2.0 + math.exp(lg2 - 2.0 * lg1))


def mean_fn(family: ModelFamily, eta):
    """E(Y | eta) as a function of the linear predictor."""
    eta = np.asarray(eta, dtype=float)
    k, th = family.kind, family.theta
    if k == LOCATION_SCALE:
        return eta + 0.0
    if k in (POISSON, POISSON_OFFSET):
        return np.exp(eta)
    if k == NEG_BINOMIAL:
        return np.exp(eta)
    if k == ZIP:
        return (1.0 - th) * np.exp(eta)
    if k == WEIBULL:
        lg1, _ = _weibull_log_gammas(th)
        return np.exp(eta + lg1)
    if k == LOGISTIC:
        return expit(eta)
    raise AssertionError(k)


def var_fn(family: ModelFamily, eta):
    """Noise functional sigma2(eta) entering the R-squared denominator."""
    eta = np.asarray(eta, dtype=float)
    k, th = family.kind, family.theta
    if k == LOCATION_SCALE:
        return np.full_like(eta, th)
    if k in (POISSON, POISSON_OFFSET):
        return np.exp(eta)
    if k == NEG_BINOMIAL:
        return th * np.exp(eta)
    if k == ZIP:
        lam = np.exp(eta)
        return (1.0 - th) * lam * (1.0 + th * lam)
    if k == WEIBULL:
        # Second-moment form E(Y^2|eta) + {E(Y|eta)}^2: the closed-form R2 map,
        # its upper bound r(theta) and the induced density are built from this
        # functional, not from the central variance.
        lg1, lg2 = _weibull_log_gammas(th)
        return np.exp(2.0 * eta) * (np.exp(lg2) + np.exp(2.0 * lg1))
    if k == LOGISTIC:
        p = expit(eta)
        return p * (1.0 - p)
    raise AssertionError(k)


def mean_prime(family: ModelFamily, eta):
    """d mu / d eta, used by the first-order approximation."""
    eta = np.asarray(eta, dtype=float)
    k, th = family.kind, family.theta
    if k == LOCATION_SCALE:
        return np.ones_like(eta)
    if k in (POISSON, POISSON_OFFSET, NEG_BINOMIAL):
        return np.exp(eta)
    if k == ZIP:
        return (1.0 - th) * np.exp(eta)
    if k == WEIBULL:
        lg1, _ = _weibull_log_gammas(th)
        return np.exp(eta + lg1)
    if k == LOGISTIC:
        p = expit(eta)
        return p * (1.0 - p)
    raise AssertionError(k)


def r2_exact(family: ModelFamily, beta0: float, W):
    """Closed-form population R-squared under eta ~ Normal(beta0, W).

    Raises UnsupportedFamily for the logistic family, which has no closed
    form and must be evaluated by the quantile-grid approximation.
    """
    if family.kind == LOGISTIC:
        raise UnsupportedFamily("logistic R2 has no closed form; use the QMC path")
    W = np.asarray(W, dtype=float)
    if np.any(W < 0):
        raise ValueError("W must be nonnegative")
    th = family.theta
    k = family.kind
    with np.errstate(divide="ignore"):
        if k == LOCATION_SCALE:
            out = W / (W + th)
        elif k == POISSON:
            out = expit(beta0 + 0.5 * W + log_expm1(W))
        elif k == NEG_BINOMIAL:
            out = expit(beta0 + 0.5 * W + log_expm1(W) - math.log(th))
        elif k == POISSON_OFFSET:
            lt = math.log(th)
            out = expit(beta0 + 0.5 * lt + 0.5 * W + log_expm1(W + lt))
        elif k == ZIP:
            lden = np.logaddexp(-beta0 - 0.5 * W, math.log(th)) if th > 0 else -beta0 - 0.5 * W
            out = (1.0 - th) * expit(log_expm1(W) - lden)
        elif k == WEIBULL:
            c0 = math.log(1.0 / weibull_r2_max(th))
            out = np.exp(log_expm1(W) - log_expm1(W + c0))
        else:
            raise AssertionError(k)
    return out if out.ndim else float(out)


def r2_grad(family: ModelFamily, beta0: float, W):
    """dR2/dW of the exact map (positive for W > 0)."""
    return np.exp(log_r2_grad(family, beta0, W))


def log_r2_grad(family: ModelFamily, beta0: float, W):
    """log dR2/dW, stable for large W."""
    if family.kind == LOGISTIC:
        raise UnsupportedFamily("logistic R2 has no closed form; use the QMC path")
    w = np.asarray(W, dtype=float)
    if np.any(w < 0):
        raise ValueError("W must be nonnegative")
    th = family.theta
    k = family.kind
    log3 = math.log(3.0)
    with np.errstate(divide="ignore"):
        if k == LOCATION_SCALE:
            out = math.log(th) - 2.0 * np.log(w + th)
        elif k == POISSON:
            lu = log_expm1(w)
            lv = -beta0 - 0.5 * w
            out = lv + log_expm1(w + log3) - math.log(2.0) - 2.0 * np.logaddexp(lu, lv)
        elif k == NEG_BINOMIAL:
            lu = log_expm1(w)
            lv = math.log(th) - beta0 - 0.5 * w
            out = lv + log_expm1(w + log3) - math.log(2.0) - 2.0 * np.logaddexp(lu, lv)
        elif k == POISSON_OFFSET:
            lt = math.log(th)
            lu = log_expm1(w + lt)
            lv = -0.5 * lt - beta0 - 0.5 * w
            out = lv + log_expm1(w + log3 + lt) - math.log(2.0) - 2.0 * np.logaddexp(lu, lv)
        elif k == ZIP:
            lu = log_expm1(w)
            lv = -beta0 - 0.5 * w
            ld = np.logaddexp(np.logaddexp(lu, lv), math.log(th)) if th > 0 else np.logaddexp(lu, lv)
            inner = np.logaddexp(lv + log_expm1(w + log3) - math.log(2.0),
                                 math.log(th) + w) if th > 0 else lv + log_expm1(w + log3) - math.log(2.0)
            out = math.log1p(-th) + inner - 2.0 * ld
        elif k == WEIBULL:
            r = weibull_r2_max(th)
            # log{ r(1-r) e^w / (e^w - r)^2 }
            lxr = w + np.log1p(-r * np.exp(-w))
            out = math.log(r) + math.log1p(-r) + w - 2.0 * lxr
        else:
            raise AssertionError(k)
    return out if out.ndim else float(out)


def r2_bounds(family: ModelFamily, beta0: float = 0.0) -> tuple[float, float]:
    """Support (r2_min, r2_max) of the R-squared map for this family."""
    k, th = family.kind, family.theta
    if k in (LOCATION_SCALE, POISSON, NEG_BINOMIAL, LOGISTIC):
        return 0.0, 1.0
    if k == POISSON_OFFSET:
        lo = (th - 1.0) / (th - 1.0 + th ** -0.5 * math.exp(-beta0))
        return lo, 1.0
    if k == ZIP:
        return 0.0, 1.0 - th
    if k == WEIBULL:
        return 0.0, weibull_r2_max(th)
    raise AssertionError(k)


def eta_variance(family: ModelFamily, W):
    """Marginal variance of the linear predictor at global variance W.

    The offset family's eta carries the standardized log offsets on top of
    the effects, so its law is Normal(beta0, W + sigma2_N) with
    sigma2_N = log(theta).
    """
    if family.kind == POISSON_OFFSET:
        return W + math.log(family.theta)
    return W


def canonical_link(family: ModelFamily, mean: float) -> float:
    """g(mean): the intercept eta solving mu(eta) = mean."""
    k, th = family.kind, family.theta
    if k == LOCATION_SCALE:
        return float(mean)
    if k in (POISSON, POISSON_OFFSET, NEG_BINOMIAL):
        if mean <= 0:
            raise LinkDomain(f"mean {mean} outside (0, inf) for log link")
        return math.log(mean)
    if k == ZIP:
        if mean <= 0:
            raise LinkDomain(f"mean {mean} outside (0, inf) for ZIP link")
        return math.log(mean / (1.0 - th))
    if k == WEIBULL:
        if mean <= 0:
            raise LinkDomain(f"mean {mean} outside (0, inf) for Weibull link")
        lg1, _ = _weibull_log_gammas(th)
        return math.log(mean) - lg1
    if k == LOGISTIC:
        if not 0.0 < mean < 1.0:
            raise LinkDomain(f"mean {mean} outside (0, 1) for logit link")
        return math.log(mean / (1.0 - mean))
    raise AssertionError(k)


# Default auxiliary parameters used by test batteries and the CLI when a
# family needs a theta and none is given.
DEFAULT_THETA = {
    LOCATION_SCALE: 1.0,
    POISSON_OFFSET: math.exp(0.5),
    NEG_BINOMIAL: 2.0,
    ZIP: 0.3,
    WEIBULL: 1.5,
}


def default_family(kind: str) -> ModelFamily:
    """Family with its default theta (if any)."""
    if kind in (POISSON, LOGISTIC):
        return ModelFamily(kind)
    return ModelFamily(kind, DEFAULT_THETA[kind])
