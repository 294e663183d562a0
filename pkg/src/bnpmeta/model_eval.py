"""Posterior predictive densities, the mean-square predictive-error criterion
D(m), Monte Carlo error diagnostics, model comparison, and a synthetic data
generator for recovery checks."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg, special

from . import bnp_model, normal_models
from .core_data import MetaDataset
from .diagnostics import DEFAULT_GRID_POINTS, DensityGrid
from .draws import PosteriorDraws
from .errors import DatasetMismatchError, DomainError, InsufficientDataError

X0_VARIANCE = 1e-4
CHUNK = 2000


# --- predictive --------------------------------------------------------------

def design_row(x, p: int) -> np.ndarray:
    """Full design row ``(1, x_1..x_p)``; ``x=None`` means all covariates zero."""
    if x is None:
        return np.concatenate([[1.0], np.zeros(p)])
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != p:
        raise DomainError(f"expected {p} covariate values, got {x.size}")
    return np.concatenate([[1.0], x])


def predictive_moments(draws: PosteriorDraws, X_full, s2, sl: slice = slice(None)):
    """Per-draw predictive means and variances (shape (k, m)) for any model kind."""
    if draws.kind == "BNP":
        return bnp_model.predictive_moments_draws_bnp(draws, X_full, s2, sl)
    return normal_models.predictive_moments_draws(draws, X_full, s2, sl)


def predictive_summary(draws: PosteriorDraws, X_full, s2, chunk: int = CHUNK):
    """Posterior predictive mean ``E`` and variance ``V`` at each row of ``X_full``.

    ``V`` is the mean of the per-draw variances plus the variance of the
    per-draw means.
    """
    X_full = np.atleast_2d(np.asarray(X_full, dtype=float))
    s2 = np.broadcast_to(np.asarray(s2, dtype=float), (X_full.shape[0],))
    K = draws.keep
    mean = np.zeros(X_full.shape[0])
    m2 = np.zeros_like(mean)
    s_v = np.zeros_like(mean)
    count = 0
    for start in range(0, K, chunk):
        sl = slice(start, min(start + chunk, K))
        m, v = predictive_moments(draws, X_full, s2, sl)
        k = m.shape[0]
        cm = m.mean(axis=0)
        # pairwise combination of chunk means and centred sums of squares
        delta = cm - mean
        total = count + k
        mean = mean + delta * (k / total)
        m2 = m2 + ((m - cm) ** 2).sum(axis=0) + delta**2 * (count * k / total)
        count = total
        s_v += v.sum(axis=0)
    return mean, s_v / K + m2 / K


def _normal_density(draws, x_full, sigma_sq, grid, chunk=500):
    total = np.zeros(grid.size)
    for start in range(0, draws.keep, chunk):
        sl = slice(start, min(start + chunk, draws.keep))
        m, v = normal_models.predictive_moments_draws(draws, x_full[None, :], [sigma_sq], sl)
        m, v = m[:, 0:1], v[:, 0:1]
        total += (np.exp(-0.5 * (grid[None, :] - m) ** 2 / v) / np.sqrt(2 * math.pi * v)).sum(axis=0)
    return total / draws.keep


def default_grid(draws: PosteriorDraws, x_full, sigma_sq, points: int = DEFAULT_GRID_POINTS) -> np.ndarray:
    """Observed y range widened by 4 posterior predictive sds at ``x_full``.

    The sd comes from the law of total variance over draws, so a single
    draw with an extreme scale cannot stretch the grid.
    """
    E, V = predictive_summary(draws, x_full[None, :], [sigma_sq])
    lo = min(draws.meta.get("y_min", E[0]), E[0])
    hi = max(draws.meta.get("y_max", E[0]), E[0])
    pad = 4.0 * math.sqrt(float(V[0]))
    return np.linspace(lo - pad, hi + pad, points)


def posterior_predictive_density(draws: PosteriorDraws, x=None, sigma_sq: float = X0_VARIANCE,
                                 grid=None, grid_points: int = DEFAULT_GRID_POINTS) -> DensityGrid:
    """Average over draws of each draw's predictive density at covariates ``x``.

    ``x`` holds the p covariate values (``None`` for all zeros) and
    ``sigma_sq`` the sampling variance of the hypothetical new report.
    """
    if not sigma_sq > 0:
        raise DomainError("sigma_sq must be positive")
    p = int(draws.meta.get("p", len(draws.columns) - 1))
    x_full = design_row(x, p)
    if grid is None:
        grid = default_grid(draws, x_full, sigma_sq, grid_points)
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2 or not np.all(np.diff(grid) > 0):
        raise DomainError("grid must be strictly increasing")
    if draws.kind == "BNP":
        f = bnp_model.predictive_density_bnp(draws, x_full, sigma_sq, grid)
    else:
        f = _normal_density(draws, x_full, sigma_sq, grid)
    meta = {"model": draws.kind, "x": x_full[1:].tolist(), "sigma_sq": sigma_sq, "draws": draws.keep}
    return DensityGrid(grid, f, meta)


# --- D criterion -------------------------------------------------------------

@dataclass
class ModelScore:
    """Mean-square predictive error of one fitted model on its dataset."""

    label: str
    D: float
    D_i: np.ndarray
    mean: np.ndarray
    variance: np.ndarray
    dataset_hash: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def sqrtD(self) -> float:
        return math.sqrt(self.D)

    @property
    def sqrtD_i(self) -> np.ndarray:
        return np.sqrt(self.D_i)

    @property
    def squared_error(self) -> float:
        return float(np.sum(self.D_i - self.variance))

    @property
    def penalty(self) -> float:
        return float(np.sum(self.variance))


def d_from_moments(y, mean, variance) -> np.ndarray:
    """``(y_i - E_i)^2 + V_i`` elementwise."""
    y, mean, variance = (np.asarray(a, dtype=float) for a in (y, mean, variance))
    return (y - mean) ** 2 + variance


def d_criterion(draws: PosteriorDraws, d: MetaDataset, label: str | None = None) -> ModelScore:
    if draws.meta.get("n", d.n) != d.n:
        raise DatasetMismatchError(f"draws were fitted on n={draws.meta.get('n')}, dataset has n={d.n}")
    h = draws.meta.get("dataset_hash")
    if h and h != d.fingerprint():
        raise DatasetMismatchError("draws were fitted on a different dataset")
    E, V = predictive_summary(draws, d.design(), d.var)
    Di = d_from_moments(d.y, E, V)
    return ModelScore(label or draws.kind, float(Di.sum()), Di, E, V, d.fingerprint(),
                      {k: draws.meta.get(k) for k in ("seed", "config_hash", "model") if k in draws.meta})


def five_number_summary(values) -> tuple:
    return tuple(float(v) for v in np.percentile(np.asarray(values, dtype=float), [0, 25, 50, 75, 100]))


def outlier_flags(sqrt_di) -> np.ndarray:
    """Values above ``Q3 + 1.5 * IQR`` of the per-observation root errors."""
    s = np.asarray(sqrt_di, dtype=float)
    q1, q3 = np.percentile(s, [25, 75])
    return s > q3 + 1.5 * (q3 - q1)


@dataclass
class ComparisonReport:
    scores: list

    @property
    def ranking(self) -> list:
        return [s.label for s in self.scores]

    def best(self) -> ModelScore:
        return self.scores[0]

    def outliers(self, label: str) -> np.ndarray:
        score = next(s for s in self.scores if s.label == label)
        return np.flatnonzero(outlier_flags(score.sqrtD_i))

    def to_text(self) -> str:
        lines = [f"{'model':<16}{'D(m)':>12}{'sqrtD':>10}  sqrtD_i five-number summary   outliers  seed"]
        for s in self.scores:
            fn = ", ".join(f"{v:.2f}" for v in five_number_summary(s.sqrtD_i))
            lines.append(
                f"{s.label:<16}{s.D:>12.4g}{s.sqrtD:>10.4g}  ({fn})  "
                f"{int(outlier_flags(s.sqrtD_i).sum()):>3}  {s.meta.get('seed', '')}"
            )
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "ranking": self.ranking,
            "models": [
                {
                    "label": s.label,
                    "D": s.D,
                    "sqrtD": s.sqrtD,
                    "squared_error": s.squared_error,
                    "penalty": s.penalty,
                    "sqrtD_i_summary": list(five_number_summary(s.sqrtD_i)),
                    "outliers": np.flatnonzero(outlier_flags(s.sqrtD_i)).tolist(),
                    "dataset_hash": s.dataset_hash,
                    **{k: v for k, v in s.meta.items()},
                }
                for s in self.scores
            ],
        }


def compare(scores: Sequence[ModelScore]) -> ComparisonReport:
    """Rank models by D(m), smallest first (ties broken by label)."""
    scores = list(scores)
    if not scores:
        raise DomainError("nothing to compare")
    hashes = {s.dataset_hash for s in scores}
    sizes = {s.D_i.size for s in scores}
    if len(hashes) > 1 or len(sizes) > 1:
        raise DatasetMismatchError("models were scored on different datasets")
    return ComparisonReport(sorted(scores, key=lambda s: (s.D, s.label)))


# --- Monte Carlo error ---------------------------------------------------------

class MCDiagnostics(NamedTuple):
    mcse: float
    halfwidth95: float
    stabilized: bool


def mc_diagnostics(trace, threshold: float = 0.1) -> MCDiagnostics:
    """Batch-means Monte Carlo standard error with floor(sqrt(N)) batches.

    Leading draws that do not fill a whole batch are dropped.
    """
    x = np.asarray(trace, dtype=float).reshape(-1)
    N = x.size
    if N < 100:
        raise InsufficientDataError(f"need at least 100 draws for batch means, got {N}")
    a = math.isqrt(N)
    b = N // a
    # shifting by one draw makes a constant trace give exactly zero
    x = x[N - a * b:] - x[-1]
    means = x.reshape(a, b).mean(axis=1)
    var_hat = b * np.sum((means - means.mean()) ** 2) / (a - 1)
    mcse = math.sqrt(var_hat / x.size)
    hw = 1.96 * mcse
    return MCDiagnostics(mcse, hw, bool(hw <= threshold))


# --- synthetic data ------------------------------------------------------------

SYNTHETIC_KINDS = ("FE", "RE2L", "RE2L-dep", "RE3L", "bimodal", "BNP")


@dataclass(frozen=True)
class SyntheticSpec:
    """Generating model and true parameter values.

    ``beta`` is ``(beta_0, ..., beta_p)``; missing trailing slopes are 0.
    Reports are split into ``n_studies`` consecutive blocks (one study per
    report by default).  ``bimodal`` draws each report's intercept from
    ``intercepts`` (with ``intercept_var`` jitter), either at random with
    ``mix_prob`` on the second one or, with ``membership="covariate"``, with
    probability ``Phi(sharpness * x_1)``.  ``BNP`` draws labels from the
    cumulative-probit weights with ``beta_omega``/``sigma_omega`` and
    intercepts ``intercepts[d - min_label]``.
    """

    kind: str = "FE"
    beta: tuple = (0.5,)
    sigma0_sq: float = 0.0
    sigma00_sq: float = 0.0
    psi: float = 0.0
    n_studies: int | None = None
    var_low: float = 0.01
    var_high: float = 0.25
    intercepts: tuple = (-2.0, 2.0)
    intercept_var: float = 0.1
    mix_prob: float = 0.5
    membership: str = "random"
    sharpness: float = 50.0
    beta_omega: tuple = (0.5,)
    sigma_omega: float = 0.5
    min_label: int = 0

    def __post_init__(self):
        if self.kind not in SYNTHETIC_KINDS:
            raise DomainError(f"unknown generating model {self.kind!r}")
        if not 0 < self.var_low <= self.var_high:
            raise DomainError("need 0 < var_low <= var_high")
        if self.sigma0_sq < 0 or self.sigma00_sq < 0 or self.intercept_var < 0:
            raise DomainError("variances must be non-negative")
        if self.membership not in ("random", "covariate"):
            raise DomainError("membership must be 'random' or 'covariate'")


def generate_synthetic(spec: SyntheticSpec, n: int, p: int = 0, seed: int = 0):
    """Simulate a dataset; returns ``(MetaDataset, truth dict)``.

    Random numbers are consumed in a fixed order (covariates, sampling
    variances, level-2 normals, level-3 normals, noise, then membership
    uniforms), so models that differ only by a zero variance give
    identical data for the same seed.
    """
    if n < 1 or p < 0:
        raise DomainError("need n >= 1 and p >= 0")
    rng = np.random.default_rng(seed)
    T = spec.n_studies or n
    if not 1 <= T <= n:
        raise DomainError("n_studies must lie in [1, n]")
    study = (np.arange(n) * T) // n
    X = rng.standard_normal((n, p))
    s2 = rng.uniform(spec.var_low, spec.var_high, n)
    e2 = rng.standard_normal(n)
    e3 = rng.standard_normal(T)
    noise = rng.standard_normal(n) * np.sqrt(s2)

    beta = np.zeros(p + 1)
    b = np.asarray(spec.beta, dtype=float)[: p + 1]
    beta[: b.size] = b
    lin = np.column_stack([np.ones(n), X]) @ beta
    truth = {"kind": spec.kind, "beta": beta.tolist(), "seed": seed, "n": n, "p": p}

    offset = np.zeros(n)
    kind = spec.kind
    if kind in ("RE2L", "RE3L"):
        offset += math.sqrt(spec.sigma0_sq) * e2
        truth["sigma0_sq"] = spec.sigma0_sq
    if kind == "RE3L":
        offset += math.sqrt(spec.sigma00_sq) * e3[study]
        truth["sigma00_sq"] = spec.sigma00_sq
    if kind == "RE2L-dep":
        M = (study[:, None] == study[None, :]).astype(float)
        np.fill_diagonal(M, 0.0)
        Sigma = spec.sigma0_sq * np.eye(n) + spec.psi * M
        offset += linalg.cholesky(Sigma, lower=True) @ e2
        truth.update(sigma0_sq=spec.sigma0_sq, psi=spec.psi)
    if kind == "bimodal":
        u = rng.uniform(size=n)
        if spec.membership == "covariate":
            if p < 1:
                raise DomainError("covariate-driven membership needs p >= 1")
            prob = special.ndtr(spec.sharpness * X[:, 0])
        else:
            prob = np.full(n, spec.mix_prob)
        label = (u < prob).astype(int)
        centers = np.asarray(spec.intercepts, dtype=float)
        offset += centers[label] + math.sqrt(spec.intercept_var) * e2
        truth.update(labels=label.tolist(), intercepts=list(spec.intercepts), intercept_var=spec.intercept_var)
    if kind == "BNP":
        bw = np.zeros(p + 1)
        b = np.asarray(spec.beta_omega, dtype=float)[: p + 1]
        bw[: b.size] = b
        z = np.column_stack([np.ones(n), X]) @ bw + spec.sigma_omega * rng.standard_normal(n)
        label = np.ceil(z).astype(int)
        centers = np.asarray(spec.intercepts, dtype=float)
        idx = label - spec.min_label
        if idx.min() < 0 or idx.max() >= centers.size:
            raise DomainError("a simulated label has no intercept; widen 'intercepts'")
        offset += centers[idx]
        truth.update(labels=label.tolist(), beta_omega=bw.tolist(), sigma_omega=spec.sigma_omega)

    y = lin + offset + noise
    d = MetaDataset(
        y=y,
        var=s2,
        study_id=[f"s{k + 1}" for k in study],
        report_id=[f"r{i + 1}" for i in range(n)],
        covariates=X,
        covariate_names=[f"x{k + 1}" for k in range(p)],
    )
    truth["spec"] = asdict(spec)
    return d, truth
