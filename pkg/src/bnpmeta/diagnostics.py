"""Exploratory tools: Anderson-Darling normality test, Gaussian KDE, density
moments and mode counting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import signal, special

from .errors import DegenerateError, InsufficientDataError

# composite normal (mean and sd estimated), alpha = .05
AD_CRITICAL_05 = 0.752
DEFAULT_GRID_POINTS = 512
_SQRT2PI = np.sqrt(2.0 * np.pi)


@dataclass(eq=False)
class DensityGrid:
    """Density values ``f`` on an increasing grid ``y``."""

    y: np.ndarray
    f: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=float)
        self.f = np.asarray(self.f, dtype=float)
        if self.y.shape != self.f.shape or self.y.ndim != 1:
            raise ValueError("y and f must be 1-d arrays of equal length")
        if self.y.size > 1 and not np.all(np.diff(self.y) > 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(self.f < 0):
            raise ValueError("density values must be non-negative")

    def integral(self) -> float:
        return float(np.trapezoid(self.f, self.y))

    def cdf(self) -> np.ndarray:
        """Cumulative trapezoid integral, normalized to end at 1."""
        inc = 0.5 * (self.f[1:] + self.f[:-1]) * np.diff(self.y)
        c = np.concatenate([[0.0], np.cumsum(inc)])
        return c / c[-1]

    def quantile(self, q):
        c = self.cdf()
        keep = np.concatenate([[True], np.diff(c) > 0])
        return np.interp(q, c[keep], self.y[keep])

    def to_csv(self) -> str:
        lines = ["y,density"]
        lines += [f"{a!r},{b!r}" for a, b in zip(self.y.tolist(), self.f.tolist())]
        return "\n".join(lines) + "\n"


class ADResult(NamedTuple):
    statistic: float
    adjusted: float
    reject_at_05: bool


def anderson_darling(values) -> ADResult:
    """Anderson-Darling test of normality with estimated mean and sd.

    The decision uses the small-sample adjusted statistic
    ``A2 * (1 + 0.75/n + 2.25/n^2)`` against 0.752.
    """
    x = np.sort(np.asarray(values, dtype=float))
    n = x.size
    if n < 8:
        raise InsufficientDataError(f"Anderson-Darling needs n >= 8, got {n}")
    sd = x.std(ddof=1)
    if not sd > 0:
        raise DegenerateError("sample has zero standard deviation")
    z = (x - x.mean()) / sd
    logcdf = special.log_ndtr(z)
    logsf = special.log_ndtr(-z)
    i = np.arange(1, n + 1)
    a2 = -n - np.sum((2 * i - 1) * (logcdf + logsf[::-1])) / n
    adj = a2 * (1.0 + 0.75 / n + 2.25 / n**2)
    return ADResult(float(a2), float(adj), bool(adj > AD_CRITICAL_05))


def silverman_bandwidth(values) -> float:
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise InsufficientDataError("bandwidth selection needs at least 2 values")
    sd = x.std(ddof=1)
    q75, q25 = np.percentile(x, [75, 25])
    spread = min(sd, (q75 - q25) / 1.34)
    if not spread > 0:
        spread = sd
    if not spread > 0:
        raise DegenerateError("all values are identical")
    return 0.9 * spread * x.size ** (-0.2)


def kde_evaluate(values, points, bandwidth: float) -> np.ndarray:
    x = np.asarray(values, dtype=float)
    pts = np.asarray(points, dtype=float)
    u = (pts[:, None] - x[None, :]) / bandwidth
    return np.exp(-0.5 * u * u).sum(axis=1) / (x.size * bandwidth * _SQRT2PI)


def gaussian_kde(values, bandwidth: float | None = None, grid_points: int = DEFAULT_GRID_POINTS) -> DensityGrid:
    """Gaussian kernel density estimate on ``[min - 3h, max + 3h]``.

    Silverman's rule is used when ``bandwidth`` is omitted (needs n >= 2); a
    single value is accepted when the bandwidth is given.
    """
    x = np.asarray(values, dtype=float).reshape(-1)
    if x.size < 1 or (bandwidth is None and x.size < 2):
        raise InsufficientDataError("kernel density estimate needs at least 2 values")
    h = silverman_bandwidth(x) if bandwidth is None else float(bandwidth)
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.linspace(x.min() - 3 * h, x.max() + 3 * h, grid_points)
    return DensityGrid(grid, kde_evaluate(x, grid, h), {"bandwidth": h, "source": "kde"})


class Moments(NamedTuple):
    mean: float
    median: float
    variance: float
    skewness: float
    kurtosis: float


def moment_summary(grid_or_values) -> Moments:
    """Mean, median, variance, skewness and (non-excess) kurtosis.

    Accepts a :class:`DensityGrid` (trapezoid moments of the normalized
    density) or raw values (population moments, n divisor).
    """
    if isinstance(grid_or_values, DensityGrid):
        g = grid_or_values
        if g.y.size < 2:
            raise DegenerateError("density grid needs at least two points")
        mass = g.integral()
        if not mass > 0:
            raise DegenerateError("density integrates to zero")
        f = g.f / mass
        mean = np.trapezoid(g.y * f, g.y)
        c = g.y - mean
        m2, m3, m4 = (np.trapezoid(c**k * f, g.y) for k in (2, 3, 4))
        median = float(g.quantile(0.5))
    else:
        x = np.asarray(grid_or_values, dtype=float)
        if x.size < 2:
            raise InsufficientDataError("moment summary needs at least 2 values")
        mean = x.mean()
        c = x - mean
        m2, m3, m4 = ((c**k).mean() for k in (2, 3, 4))
        median = float(np.median(x))
    if not m2 > 0:
        raise DegenerateError("zero variance")
    return Moments(float(mean), median, float(m2), float(m3 / m2**1.5), float(m4 / m2**2))


def count_modes(grid: DensityGrid, prominence: float = 0.05) -> int:
    """Local maxima whose prominence is at least ``prominence * max(f)``."""
    f = np.concatenate([[0.0], grid.f, [0.0]])
    peaks, _ = signal.find_peaks(f, prominence=prominence * grid.f.max())
    return int(peaks.size)
