"""Shared numerical and RNG helpers."""
from __future__ import annotations

import numpy as np


def as_generator(seed) -> np.random.Generator:
    """Accept an int seed, a SeedSequence, a Generator, or None."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def log_expm1(x):
    """log(e^x - 1), stable for both small and large x > 0."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    small = x < 0.6931471805599453
    with np.errstate(divide="ignore", invalid="ignore"):
        out[small] = np.log(np.expm1(x[small]))
    big = ~small
    out[big] = x[big] + np.log1p(-np.exp(-x[big]))
    return out


def logaddexp(a, b):
    return np.logaddexp(a, b)


def half_line_nodes(n: int):
    """Gauss-Legendre nodes/weights for integrals over (0, inf).

    Uses the substitution w = v / (1 - v), dw = dv / (1 - v)^2 on (0, 1),
    so the returned weights already include the Jacobian.
    """
    v, wt = np.polynomial.legendre.leggauss(n)
    v = 0.5 * (v + 1.0)
    wt = 0.5 * wt
    w = v / (1.0 - v)
    jac = 1.0 / (1.0 - v) ** 2
    return w, wt * jac


def ks_distance(samples, cdf) -> float:
    """Kolmogorov-Smirnov sup-distance between an i.i.d. sample and a CDF."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    f = cdf(x)
    grid = np.arange(1, n + 1) / n
    return float(max(np.max(grid - f), np.max(f - (grid - 1.0 / n))))
