"""Low-level random draws shared by the normal and nonparametric samplers."""

from __future__ import annotations

import math

import numpy as np
from scipy import linalg, special

from .errors import NumericalError


def slice_sample(logdens, x0: float, rng: np.random.Generator, width: float = 1.0,
                 max_steps: int = 64, lower: float = -np.inf, upper: float = np.inf) -> float:
    """One univariate slice-sampling update (stepping out, then shrinkage).

    ``logdens`` must return ``-inf`` outside its support; ``lower``/``upper``
    clip the initial bracket so the support bound is never stepped over.
    """
    f0 = logdens(x0)
    if not np.isfinite(f0):
        raise NumericalError(f"slice sampler started outside the support (x={x0})")
    level = f0 - rng.exponential()
    left = x0 - width * rng.uniform()
    right = left + width
    j = int(max_steps * rng.uniform())
    k = max_steps - 1 - j
    while j > 0 and left > lower and logdens(left) > level:
        left -= width
        j -= 1
    while k > 0 and right < upper and logdens(right) > level:
        right += width
        k -= 1
    left, right = max(left, lower), min(right, upper)
    for _ in range(200):
        x1 = left + rng.uniform() * (right - left)
        if logdens(x1) > level:
            return x1
        if x1 < x0:
            left = x1
        else:
            right = x1
    raise NumericalError("slice sampler failed to shrink onto the slice")


def log_interval_prob(a, b):
    """``log(Phi(b) - Phi(a))`` for a < b, stable in both tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    upper = a > 0
    lo = np.where(upper, -b, a)
    hi = np.where(upper, -a, b)
    lhi = special.log_ndtr(hi)
    llo = special.log_ndtr(lo)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = lhi + np.log1p(-np.exp(llo - lhi))
    return out


def truncated_normal(mean, sd, lo, hi, rng: np.random.Generator):
    """Draw from N(mean, sd^2) truncated to (lo, hi], elementwise.

    Inverse-CDF sampling in log space, so intervals far in either tail are
    handled exactly.  Returns ``(draws, n_clipped)`` where ``n_clipped``
    counts draws that rounding pushed onto an interval boundary.
    """
    mean, sd, lo, hi = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (mean, sd, lo, hi)))
    a = (lo - mean) / sd
    b = (hi - mean) / sd
    flip = a > 0
    a2 = np.where(flip, -b, a)
    b2 = np.where(flip, -a, b)
    la = special.log_ndtr(a2)
    lb = special.log_ndtr(b2)
    v = rng.uniform(size=mean.shape)
    with np.errstate(divide="ignore", under="ignore"):
        logu = lb + np.log(np.exp(la - lb) + v * (-np.expm1(la - lb)))
    x = special.ndtri_exp(logu)
    x = np.where(flip, -x, x)
    out = mean + sd * x
    lo_open = np.nextafter(lo, np.inf)
    bad = ~np.isfinite(out) | (out < lo_open) | (out > hi)
    n_bad = int(np.count_nonzero(bad))
    if n_bad:
        fallback = np.where(np.abs(hi - mean) < np.abs(lo - mean), hi, lo_open)
        fallback = np.where(np.isfinite(fallback), fallback, np.where(np.isfinite(hi), hi, lo_open))
        out = np.where(bad, np.clip(np.where(np.isfinite(out), out, fallback), lo_open, hi), out)
    return out, n_bad


def mvn_from_precision(P: np.ndarray, b: np.ndarray, rng: np.random.Generator, what: str = "parameter"):
    """Draw x ~ N(P^{-1} b, P^{-1}); returns ``(x, mean)``."""
    try:
        L = linalg.cholesky(P, lower=True, check_finite=True)
    except (linalg.LinAlgError, ValueError):
        cond = np.linalg.cond(P) if np.all(np.isfinite(P)) else np.inf
        raise NumericalError(
            f"{what} full-conditional precision is not positive definite (condition number {cond:.3g})"
        ) from None
    mean = linalg.cho_solve((L, True), b)
    z = rng.standard_normal(b.shape[0])
    return mean + linalg.solve_triangular(L.T, z, lower=False), mean


def categorical_rows(logp: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Sample one column index per row from unnormalized log-probabilities."""
    m = logp.max(axis=1, keepdims=True)
    w = np.exp(logp - m)
    c = np.cumsum(w, axis=1)
    u = rng.uniform(size=(logp.shape[0], 1)) * c[:, -1:]
    return np.minimum((c < u).sum(axis=1), logp.shape[1] - 1)


def log_normal_pdf(x, mean, var):
    return -0.5 * (np.log(2 * np.pi * var) + (x - mean) ** 2 / var)


class VariancePrior:
    """Prior on a random-intercept standard deviation ``sigma``.

    kinds: ``uniform`` (sigma ~ Un(0, scale)), ``invgamma``
    (sigma^-2 ~ Ga(eps, eps)), ``half-t`` (density proportional to
    ``(1 + (sigma/scale)^2/df)^(-(df+1)/2)``).
    """

    def __init__(self, kind: str = "uniform", scale: float = 100.0, eps: float = 0.001, df: float = 1.0):
        if kind not in ("uniform", "invgamma", "half-t"):
            raise ValueError(f"unknown variance prior {kind!r}")
        self.kind, self.scale, self.eps, self.df = kind, float(scale), float(eps), float(df)

    def log_density_sd(self, sigma: float) -> float:
        if sigma <= 0:
            return -np.inf
        if self.kind == "uniform":
            return 0.0 if sigma < self.scale else -np.inf
        if self.kind == "half-t":
            return -0.5 * (self.df + 1) * math.log1p((sigma / self.scale) ** 2 / self.df)
        tau = sigma**-2
        # density of sigma when sigma^-2 ~ Ga(eps, eps)
        return (self.eps - 1) * math.log(tau) - self.eps * tau + math.log(2 * sigma**-3)

    def sample_prior_sd(self, rng: np.random.Generator) -> float:
        if self.kind == "uniform":
            return float(rng.uniform(0.0, self.scale))
        if self.kind == "half-t":
            return float(abs(self.scale * rng.standard_t(self.df)))
        return float(rng.gamma(self.eps, 1.0 / self.eps) ** -0.5)

    def update_sd(self, sum_sq: float, count: int, sigma: float, rng: np.random.Generator) -> float:
        """Draw sigma given ``count`` zero-mean normal effects with sum of squares ``sum_sq``."""
        if self.kind == "invgamma":
            tau = rng.gamma(self.eps + 0.5 * count, 1.0 / (self.eps + 0.5 * sum_sq))
            return float(tau**-0.5)
        upper = math.log(self.scale) if self.kind == "uniform" else np.inf
        prior = self.log_density_sd

        def logdens(t):
            # below exp(-300) the sum-of-squares term overflows; treat as outside the support
            if t >= upper or t < -300.0:
                return -np.inf
            s = math.exp(t)
            return prior(s) + (1 - count) * t - 0.5 * sum_sq * math.exp(-2 * t)

        t = slice_sample(logdens, math.log(sigma), rng, width=1.0, lower=-300.0, upper=upper)
        return math.exp(t)
