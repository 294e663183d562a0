"""Effect-size statistics and their sampling variances.

The formulas follow the table used throughout the package: the Fisher z
variance is ``1/(n+3)`` and the Hedges variance carries a single factor of
the small-sample correction ``c*``.  Pass ``literature_variant=True`` to get
the more common textbook forms (``1/(n-3)`` and ``c*^2``).
"""

from __future__ import annotations

import math
from typing import NamedTuple

from .errors import DegenerateError, DomainError, ZeroCellError


class EffectSizeResult(NamedTuple):
    es: float
    var: float


def hedges_correction(n1: int, n2: int) -> float:
    """Small-sample bias correction ``c* = 1 - 3/(4(n1+n2-2)-1)``."""
    return 1.0 - 3.0 / (4.0 * (n1 + n2 - 2) - 1.0)


def hedges_g(mean1, mean2, var1, var2, n1, n2, *, literature_variant=False) -> EffectSizeResult:
    """Unbiased standardized mean difference of two independent groups.

    ``var1``/``var2`` are the group sample variances.
    """
    if n1 < 2 or n2 < 2:
        raise DomainError("each group needs n >= 2")
    if var1 < 0 or var2 < 0:
        raise DomainError("group variances must be non-negative")
    pooled = ((n1 - 1) * var1 + (n2 - 1) * var2) / (n1 + n2 - 2)
    if not pooled > 0:
        raise DegenerateError("pooled variance is zero")
    c = hedges_correction(n1, n2)
    es = (mean1 - mean2) / math.sqrt(pooled) * c
    factor = c * c if literature_variant else c
    var = ((n1 + n2) / (n1 * n2) + es * es / (2.0 * (n1 + n2))) * factor
    return EffectSizeResult(es, var)


def fisher_z(rho, n, *, literature_variant=False) -> EffectSizeResult:
    if not -1.0 < rho < 1.0:
        raise DomainError(f"|rho| must be < 1, got {rho}")
    if n < 1:
        raise DomainError("n must be >= 1")
    if literature_variant:
        if n <= 3:
            raise DomainError("the 1/(n-3) variance needs n > 3")
        var = 1.0 / (n - 3)
    else:
        var = 1.0 / (n + 3)
    return EffectSizeResult(math.atanh(rho), var)


def log_odds_ratio(n11, n10, n01, n00) -> EffectSizeResult:
    """Log odds ratio of a 2x2 table; no continuity correction."""
    cells = (n11, n10, n01, n00)
    if any(c < 0 for c in cells):
        raise DomainError("counts must be non-negative")
    if any(c == 0 for c in cells):
        raise ZeroCellError("2x2 table has an empty cell")
    es = math.log((n11 / n10) / (n01 / n00))
    return EffectSizeResult(es, sum(1.0 / c for c in cells))


def falconer_heritability(rho_mz, n_mz, rho_dz, n_dz) -> EffectSizeResult:
    """Twice the MZ minus DZ twin correlation, with its sampling variance.

    Negative estimates are legitimate and returned as-is.
    """
    for r in (rho_mz, rho_dz):
        if not -1.0 <= r <= 1.0:
            raise DomainError(f"correlation out of [-1, 1]: {r}")
    if n_mz < 1 or n_dz < 1:
        raise DomainError("pair counts must be >= 1")
    es = 2.0 * (rho_mz - rho_dz)
    var = 4.0 * ((1.0 - rho_mz**2) ** 2 / n_mz + (1.0 - rho_dz**2) ** 2 / n_dz)
    return EffectSizeResult(es, var)


# column names expected by the CLI for each statistic
COLUMNS = {
    "hedges": ("mean1", "mean2", "var1", "var2", "n1", "n2"),
    "fisher": ("rho", "n"),
    "logodds": ("n11", "n10", "n01", "n00"),
    "falconer": ("rho_mz", "n_mz", "rho_dz", "n_dz"),
}

FUNCTIONS = {
    "hedges": hedges_g,
    "fisher": fisher_z,
    "logodds": log_odds_ratio,
    "falconer": falconer_heritability,
}
