"""Bayesian nonparametric meta-analysis: an infinite mixture of normal
regressions whose integer-indexed random intercepts get covariate-dependent
cumulative-probit weights

    omega_j(x) = Phi((j - x'beta_w) / sigma_w) - Phi((j - 1 - x'beta_w) / sigma_w),

fit by a data-augmented Gibbs sampler.  Each observation carries a component
label ``d_i`` and a latent probit variable ``z_i`` in ``(d_i - 1, d_i]``.
Intercepts are instantiated lazily: those of components nobody occupies are
drawn from their prior while labels are updated and dropped afterwards.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg

from .core_data import MetaDataset
from .draws import MCMCConfig, PosteriorDraws
from .errors import DomainError, NumericalError
from .normal_models import COVARIATE_MODES, PriorConfig, ssvs_inclusion_prob
from .samplers import categorical_rows, log_interval_prob, log_normal_pdf, mvn_from_precision, truncated_normal

SAMPLING_WINDOW = 6
PREDICTIVE_WINDOW = 8
MAX_COMPONENTS = 20_000


# --- mixture weights ---------------------------------------------------------

def window_bounds(eta, sigma_omega: float, window: float) -> tuple[int, int]:
    """Smallest integer range whose cells cover ``eta +/- window * sigma_omega``."""
    eta = np.asarray(eta, dtype=float)
    lo = math.floor(float(np.min(eta)) - window * sigma_omega)
    hi = math.ceil(float(np.max(eta)) + window * sigma_omega)
    return lo, hi


def component_weights(j, eta, sigma_omega):
    """omega_j for arrays of component indices and linear predictors (broadcast)."""
    j = np.asarray(j, dtype=float)
    eta = np.asarray(eta, dtype=float)
    return np.exp(log_interval_prob((j - 1.0 - eta) / sigma_omega, (j - eta) / sigma_omega))


def mixture_weights(eta: float, sigma_omega: float, window: int = PREDICTIVE_WINDOW) -> dict:
    """Weights ``{j: omega_j}`` over the truncation window around ``eta``.

    The omitted tail mass is at most ``2 * Phi(-window)``.
    """
    if window < 1:
        raise DomainError("window must be >= 1")
    if not sigma_omega > 0:
        raise DomainError("sigma_omega must be positive")
    lo, hi = window_bounds(eta, sigma_omega, window)
    js = np.arange(lo, hi + 1)
    w = component_weights(js, eta, sigma_omega)
    return dict(zip(js.tolist(), w.tolist()))


def telescoped_mass(lo: int, hi: int, eta: float, sigma_omega: float) -> float:
    """Total weight of components ``lo..hi`` as one CDF difference."""
    return float(np.exp(log_interval_prob((lo - 1 - eta) / sigma_omega, (hi - eta) / sigma_omega)))


# --- state and data ----------------------------------------------------------

@dataclass
class BNPState:
    beta: np.ndarray
    gamma: np.ndarray
    mu0: dict
    phi: float
    sigma0_sq: float
    beta_omega: np.ndarray
    sigma_omega: float
    alloc: np.ndarray
    z: np.ndarray

    def occupied(self) -> tuple[np.ndarray, np.ndarray]:
        js = np.array(sorted(self.mu0), dtype=int)
        return js, np.array([self.mu0[j] for j in js.tolist()], dtype=float)

    def check(self):
        """Raise if the structural invariants are violated."""
        if not (self.phi > 0 and self.sigma0_sq > 0 and self.sigma_omega > 0):
            raise NumericalError("phi, sigma0^2 and sigma_omega must stay positive")
        if np.any(self.z > self.alloc) or np.any(self.z <= self.alloc - 1):
            raise NumericalError("latent probit variable outside its label's cell")
        if not set(np.unique(self.alloc).tolist()) <= set(self.mu0):
            raise NumericalError("a label has no instantiated intercept")


class BNPProblem:
    """Data for one fit; ``y`` may be reassigned (joint-distribution tests)."""

    def __init__(self, d: MetaDataset, covariate_mode: str = "spike-slab"):
        if covariate_mode not in COVARIATE_MODES:
            raise DomainError(f"unknown covariate mode {covariate_mode!r}")
        self.covariate_mode = covariate_mode
        self.n = d.n
        self.y = d.y.copy()
        self.s2 = d.var.copy()
        self.w = 1.0 / self.s2
        full = d.design()
        self.columns = (0,) if covariate_mode == "none" else tuple(range(d.p + 1))
        self.X = full[:, self.columns]
        self.q = self.X.shape[1]
        self.p_ss = self.q - 1 if covariate_mode == "spike-slab" else 0
        self.XtWX = self.X.T @ (self.w[:, None] * self.X)
        # weights use the same covariates as the mean regression
        self.Xw = self.X
        self.XwtXw = self.Xw.T @ self.Xw


def slope_variances(gamma, q, p_ss, priors: PriorConfig) -> np.ndarray:
    """Unscaled prior variances of the slopes (multiplied by phi in the model)."""
    v = np.full(q - 1, priors.v_slope)
    if p_ss:
        v = np.where(np.asarray(gamma) > 0, priors.v1, priors.v0)
    return v


# --- Gibbs updates -----------------------------------------------------------

def update_allocations(state: BNPState, prob: BNPProblem, window: float, rng: np.random.Generator) -> BNPState:
    """Draw every label from its conditional with the probit variable integrated out.

    Intercepts of components in the window that nobody currently occupies
    are drawn from N(0, sigma0^2) first; afterwards only occupied ones are kept.
    """
    eta = prob.Xw @ state.beta_omega
    so = state.sigma_omega
    resid = prob.y - prob.X @ state.beta
    for attempt in range(2):
        lo, hi = window_bounds(eta, so, window)
        J = hi - lo + 1
        if J > MAX_COMPONENTS:
            raise NumericalError(
                f"truncation window spans {J} components (sigma_omega={so:.4g}, eta range "
                f"[{eta.min():.4g}, {eta.max():.4g}])"
            )
        js = np.arange(lo, hi + 1)
        mu = rng.standard_normal(J) * math.sqrt(state.sigma0_sq)
        for j, m in state.mu0.items():
            if lo <= j <= hi:
                mu[j - lo] = m
        logp = log_interval_prob((js[None, :] - 1.0 - eta[:, None]) / so, (js[None, :] - eta[:, None]) / so)
        logp = logp + log_normal_pdf(resid[:, None], mu[None, :], (state.phi * prob.s2)[:, None])
        if np.all(np.any(np.isfinite(logp), axis=1)):
            break
        window *= 2
    else:
        bad = int(np.flatnonzero(~np.any(np.isfinite(logp), axis=1))[0])
        raise NumericalError(f"all label probabilities vanish for observation {bad + 1} (eta={eta[bad]:.4g})")
    k = categorical_rows(logp, rng)
    state.alloc = js[k]
    occ = np.unique(k)
    state.mu0 = dict(zip(js[occ].tolist(), mu[occ].tolist()))
    return state


def update_latent_probit(state: BNPState, prob: BNPProblem, rng: np.random.Generator) -> int:
    """Redraw ``z_i ~ N(x_i'beta_w, sigma_w^2)`` truncated to ``(d_i - 1, d_i]``.

    Returns the number of draws that needed boundary clipping.
    """
    eta = prob.Xw @ state.beta_omega
    d = state.alloc.astype(float)
    state.z, clipped = truncated_normal(eta, state.sigma_omega, d - 1.0, d, rng)
    return clipped


def weight_regression_posterior(Xw: np.ndarray, z: np.ndarray, priors: PriorConfig):
    """Normal-gamma posterior of (beta_w, sigma_w^-2) given latent z.

    Returns ``(chol_factor, mean, shape, rate)`` with beta_w | sigma_w ~
    N(mean, sigma_w^2 Lambda^-1) and sigma_w^-2 ~ Ga(shape, rate).
    """
    c = priors.beta_omega_scale
    Lam = Xw.T @ Xw + np.eye(Xw.shape[1]) / c
    try:
        L = linalg.cholesky(Lam, lower=True)
    except linalg.LinAlgError:
        raise NumericalError(
            f"weight-regression design is singular (condition number {np.linalg.cond(Lam):.3g})"
        ) from None
    m = linalg.cho_solve((L, True), Xw.T @ z)
    r = z - Xw @ m
    shape = priors.sigma_omega_shape + 0.5 * z.size
    rate = priors.sigma_omega_rate + 0.5 * (r @ r + (m @ m) / c)
    return L, m, shape, rate


def update_weight_regression(state: BNPState, Xw: np.ndarray, priors: PriorConfig,
                             rng: np.random.Generator) -> BNPState:
    L, m, shape, rate = weight_regression_posterior(Xw, state.z, priors)
    tau = rng.gamma(shape, 1.0 / rate)
    state.sigma_omega = float(tau**-0.5)
    eps = rng.standard_normal(m.size)
    state.beta_omega = m + state.sigma_omega * linalg.solve_triangular(L.T, eps, lower=False)
    return state


def _labels(state: BNPState):
    js, mu = state.occupied()
    idx = np.searchsorted(js, state.alloc)
    return js, mu, idx


def update_intercepts_bnp(state: BNPState, prob: BNPProblem, rng: np.random.Generator) -> BNPState:
    """Conjugate normal draw of every occupied intercept."""
    js, _, idx = _labels(state)
    J = js.size
    w = prob.w / state.phi
    resid = prob.y - prob.X @ state.beta
    prec = np.bincount(idx, weights=w, minlength=J) + 1.0 / state.sigma0_sq
    mean = np.bincount(idx, weights=w * resid, minlength=J) / prec
    mu = mean + rng.standard_normal(J) / np.sqrt(prec)
    state.mu0 = dict(zip(js.tolist(), mu.tolist()))
    return state


def update_beta_gamma_bnp(state: BNPState, prob: BNPProblem, priors: PriorConfig,
                          rng: np.random.Generator) -> BNPState:
    """Joint Gaussian draw of the coefficients and occupied intercepts, then SSVS.

    The intercept and the component intercepts are only identified through
    their priors, so they are drawn together rather than one given the other.
    Slope prior variances are multiplied by phi.
    """
    js, _, idx = _labels(state)
    J, q, n = js.size, prob.q, prob.n
    w = prob.w / state.phi
    Z = np.zeros((n, J))
    Z[np.arange(n), idx] = 1.0
    A = np.hstack([prob.X, Z])
    P = A.T @ (w[:, None] * A)
    prior_var = np.concatenate([
        [priors.v_intercept],
        state.phi * slope_variances(state.gamma, q, prob.p_ss, priors),
        np.full(J, state.sigma0_sq),
    ])
    P[np.diag_indices_from(P)] += 1.0 / prior_var
    theta, _ = mvn_from_precision(P, A.T @ (w * prob.y), rng, "coefficient/intercept")
    state.beta = theta[:q]
    state.mu0 = dict(zip(js.tolist(), theta[q:].tolist()))
    if prob.p_ss:
        pi = ssvs_inclusion_prob(state.beta[1:], priors.v0, priors.v1, priors.bernoulli_p, scale=state.phi)
        state.gamma = (rng.uniform(size=prob.p_ss) < pi).astype(np.int8)
    return state


def update_phi(state: BNPState, prob: BNPProblem, priors: PriorConfig, rng: np.random.Generator) -> BNPState:
    """Conjugate gamma draw of 1/phi (likelihood and phi-scaled slope priors)."""
    js, mu, idx = _labels(state)
    r = prob.y - prob.X @ state.beta - mu[idx]
    slopes = state.beta[1:]
    v = slope_variances(state.gamma, prob.q, prob.p_ss, priors)
    shape = 0.5 * priors.a_phi + 0.5 * prob.n + 0.5 * slopes.size
    rate = 0.5 * priors.a_phi + 0.5 * np.sum(r * r * prob.w) + 0.5 * np.sum(slopes**2 / v)
    state.phi = float(1.0 / rng.gamma(shape, 1.0 / rate))
    return state


def update_sigma0_bnp(state: BNPState, priors: PriorConfig, rng: np.random.Generator) -> BNPState:
    """Update the intercept scale given the occupied intercepts only."""
    _, mu = state.occupied()
    if mu.size == 0:
        raise NumericalError("no occupied component")
    sd = priors.sd_prior(2).update_sd(float(mu @ mu), mu.size, math.sqrt(state.sigma0_sq), rng)
    state.sigma0_sq = sd * sd
    return state


def sweep(state: BNPState, prob: BNPProblem, priors: PriorConfig, rng: np.random.Generator,
          window: float = SAMPLING_WINDOW) -> int:
    """One systematic scan; returns the number of clipped probit draws."""
    update_allocations(state, prob, window, rng)
    clipped = update_latent_probit(state, prob, rng)
    update_weight_regression(state, prob.Xw, priors, rng)
    update_intercepts_bnp(state, prob, rng)
    update_beta_gamma_bnp(state, prob, priors, rng)
    update_phi(state, prob, priors, rng)
    update_sigma0_bnp(state, priors, rng)
    return clipped


# --- prior simulation --------------------------------------------------------

def sample_prior_bnp(prob: BNPProblem, priors: PriorConfig, rng: np.random.Generator) -> BNPState:
    """Draw every parameter and augmentation variable from the prior."""
    n, q = prob.n, prob.q
    phi = 1.0 / rng.gamma(0.5 * priors.a_phi, 2.0 / priors.a_phi)
    gamma = (rng.uniform(size=prob.p_ss) < priors.bernoulli_p).astype(np.int8)
    v = np.concatenate([[priors.v_intercept], phi * slope_variances(gamma, q, prob.p_ss, priors)])
    beta = rng.standard_normal(q) * np.sqrt(v)
    sigma0 = priors.sd_prior(2).sample_prior_sd(rng)
    sigma_omega = rng.gamma(priors.sigma_omega_shape, 1.0 / priors.sigma_omega_rate) ** -0.5
    beta_omega = rng.standard_normal(prob.Xw.shape[1]) * sigma_omega * math.sqrt(priors.beta_omega_scale)
    z = prob.Xw @ beta_omega + sigma_omega * rng.standard_normal(n)
    alloc = np.ceil(z).astype(int)
    js = np.unique(alloc)
    mu = rng.standard_normal(js.size) * sigma0
    return BNPState(beta=beta, gamma=gamma, mu0=dict(zip(js.tolist(), mu.tolist())), phi=float(phi),
                    sigma0_sq=sigma0**2, beta_omega=beta_omega, sigma_omega=float(sigma_omega),
                    alloc=alloc, z=z)


def simulate_y_bnp(state: BNPState, prob: BNPProblem, rng: np.random.Generator) -> np.ndarray:
    js, mu, idx = _labels(state)
    mean = prob.X @ state.beta + mu[idx]
    return mean + rng.standard_normal(prob.n) * np.sqrt(state.phi * prob.s2)


# --- driver ------------------------------------------------------------------

def initial_state(prob: BNPProblem, priors: PriorConfig) -> BNPState:
    """Single occupied component at index 1, weighted least-squares coefficients."""
    beta = np.linalg.solve(prob.XtWX + 1e-8 * np.eye(prob.q), prob.X.T @ (prob.w * prob.y))
    spread = float(np.std(prob.y)) if prob.n > 1 else 1.0
    sigma0 = min(0.5 * priors.b0, max(spread, 1e-2))
    beta_omega = np.zeros(prob.Xw.shape[1])
    beta_omega[0] = 0.5
    return BNPState(beta=beta, gamma=np.ones(prob.p_ss, dtype=np.int8), mu0={1: 0.0}, phi=1.0,
                    sigma0_sq=sigma0**2, beta_omega=beta_omega, sigma_omega=1.0,
                    alloc=np.ones(prob.n, dtype=int), z=np.full(prob.n, 0.5))


@dataclass(frozen=True)
class BNPSpec:
    covariate_mode: str = "spike-slab"
    priors: PriorConfig = field(default_factory=PriorConfig)
    window: float = SAMPLING_WINDOW

    def __post_init__(self):
        if self.covariate_mode not in COVARIATE_MODES:
            raise DomainError(f"unknown covariate mode {self.covariate_mode!r}")
        if not self.window >= 1:
            raise DomainError("window must be >= 1")


def fit_bnp(d: MetaDataset, priors: PriorConfig | None = None, mcmc: MCMCConfig | None = None,
            window: float = SAMPLING_WINDOW, covariate_mode: str = "spike-slab",
            init: BNPState | None = None) -> PosteriorDraws:
    """Run one chain of the nonparametric model (deterministic given the seed)."""
    t0 = time.perf_counter()
    priors = priors or PriorConfig()
    mcmc = mcmc or MCMCConfig()
    BNPSpec(covariate_mode, priors, window)
    prob = BNPProblem(d, covariate_mode)
    rng = np.random.default_rng(mcmc.seed)
    state = init or initial_state(prob, priors)

    keep = mcmc.keep
    out = {
        "beta": np.empty((keep, prob.q)),
        "gamma": np.empty((keep, prob.p_ss), dtype=np.int8),
        "phi": np.empty(keep),
        "sigma0_sq": np.empty(keep),
        "beta_omega": np.empty((keep, prob.Xw.shape[1])),
        "sigma_omega": np.empty(keep),
        "n_occupied": np.empty(keep, dtype=np.int32),
        "occ_ptr": np.zeros(keep + 1, dtype=np.int64),
    }
    occ_j, occ_mu = [], []
    clipped_total = 0
    k = 0
    last_good = None
    for it in range(mcmc.iterations):
        try:
            clipped_total += sweep(state, prob, priors, rng, window)
        except NumericalError as exc:
            raise NumericalError(f"{exc}; iteration {it}; last good state: {last_good}") from None
        if not (np.all(np.isfinite(state.beta)) and np.isfinite(state.phi) and np.isfinite(state.sigma_omega)):
            raise NumericalError(f"non-finite state at iteration {it}; last good state: {last_good}")
        if mcmc.retained(it):
            js, mu = state.occupied()
            out["beta"][k] = state.beta
            out["gamma"][k] = state.gamma
            out["phi"][k] = state.phi
            out["sigma0_sq"][k] = state.sigma0_sq
            out["beta_omega"][k] = state.beta_omega
            out["sigma_omega"][k] = state.sigma_omega
            out["n_occupied"][k] = js.size
            out["occ_ptr"][k + 1] = out["occ_ptr"][k] + js.size
            occ_j.append(js)
            occ_mu.append(mu)
            k += 1
        last_good = (state.beta.copy(), state.phi, state.sigma0_sq, state.sigma_omega, dict(state.mu0))
    out["occ_j"] = np.concatenate(occ_j).astype(np.int64)
    out["occ_mu"] = np.concatenate(occ_mu)
    meta = {
        "model": "BNP",
        "covariate_mode": covariate_mode,
        "priors": asdict(priors),
        "window": window,
        "predictive_window": PREDICTIVE_WINDOW,
        "seed": mcmc.seed,
        "burn": mcmc.burn,
        "keep": mcmc.keep,
        "thin": mcmc.thin,
        "runtime_sec": time.perf_counter() - t0,
        "n": d.n,
        "p": d.p,
        "dataset_hash": d.fingerprint(),
        "y_min": float(d.y.min()),
        "y_max": float(d.y.max()),
        "clipped_probit_draws": clipped_total,
    }
    return PosteriorDraws(kind="BNP", params=out, meta=meta, columns=prob.columns)


# --- prediction --------------------------------------------------------------

def predictive_moments_bnp(state: BNPState, x, sigma_sq: float, window: int = PREDICTIVE_WINDOW):
    """Mean and variance of one draw's predictive mixture at covariates ``x``.

    ``x`` is the full design row ``(1, x_1, ...)`` restricted to the columns
    the model uses.  Components without an instantiated intercept enter
    through their expectation under the N(0, sigma0^2) prior.
    """
    x = np.asarray(x, dtype=float)
    eta = float(x @ state.beta_omega)
    lin = float(x @ state.beta)
    weights = mixture_weights(eta, state.sigma_omega, window)
    total = sum(weights.values())
    m1 = m2 = 0.0
    for j, w in weights.items():
        w /= total
        if j in state.mu0:
            m = state.mu0[j] + lin
            m1 += w * m
            m2 += w * m * m
        else:
            m1 += w * lin
            m2 += w * (lin * lin + state.sigma0_sq)
    return m1, state.phi * sigma_sq + max(m2 - m1 * m1, 0.0)


class BNPDrawArrays:
    """Occupied intercepts of all draws padded to a rectangular array."""

    def __init__(self, draws: PosteriorDraws):
        p = draws.params
        ptr = p["occ_ptr"]
        counts = np.diff(ptr)
        K, Jmax = counts.size, max(int(counts.max()), 1)
        self.j = np.zeros((K, Jmax))
        self.mu = np.zeros((K, Jmax))
        self.mask = np.arange(Jmax)[None, :] < counts[:, None]
        rows = np.repeat(np.arange(K), counts)
        cols = np.arange(ptr[-1]) - np.repeat(ptr[:-1], counts)
        self.j[rows, cols] = p["occ_j"]
        self.mu[rows, cols] = p["occ_mu"]


def _arrays(draws: PosteriorDraws) -> BNPDrawArrays:
    if "padded" not in draws._cache:
        draws._cache["padded"] = BNPDrawArrays(draws)
    return draws._cache["padded"]


def _chunk_components(draws, X, sl):
    """Occupied weights/means plus the leftover prior mass for draws ``sl``.

    Shapes: weights and means (k, m, J); leftover weight and linear predictor (k, m).
    """
    arr = _arrays(draws)
    p = draws.params
    eta = p["beta_omega"][sl] @ X.T
    lin = p["beta"][sl] @ X.T
    so = p["sigma_omega"][sl][:, None, None]
    jj = arr.j[sl][:, None, :]
    w = np.exp(log_interval_prob((jj - 1.0 - eta[:, :, None]) / so, (jj - eta[:, :, None]) / so))
    w = np.where(arr.mask[sl][:, None, :], w, 0.0)
    rest = np.clip(1.0 - w.sum(axis=2), 0.0, 1.0)
    means = arr.mu[sl][:, None, :] + lin[:, :, None]
    return w, means, rest, lin


def predictive_moments_draws_bnp(draws: PosteriorDraws, X_full: np.ndarray, s2, sl: slice = slice(None)):
    """Per-draw predictive means and variances for draws ``sl``, shape (k, m)."""
    X = np.atleast_2d(X_full)[:, list(draws.columns)]
    s2 = np.asarray(s2, dtype=float)
    phi = draws.params["phi"][sl]
    s0 = draws.params["sigma0_sq"][sl]
    w, m, rest, lin = _chunk_components(draws, X, sl)
    m1 = (w * m).sum(axis=2) + rest * lin
    m2 = (w * m * m).sum(axis=2) + rest * (lin * lin + s0[:, None])
    return m1, phi[:, None] * s2[None, :] + np.maximum(m2 - m1 * m1, 0.0)


def predictive_density_bnp(draws: PosteriorDraws, x_full, sigma_sq: float, grid, chunk: int = 500) -> np.ndarray:
    """Posterior predictive density on ``grid`` averaged over all draws."""
    X = np.atleast_2d(np.asarray(x_full, dtype=float))[:, list(draws.columns)]
    grid = np.asarray(grid, dtype=float)
    K = draws.keep
    phi = draws.params["phi"]
    s0 = draws.params["sigma0_sq"]
    total = np.zeros(grid.size)
    for start in range(0, K, chunk):
        sl = slice(start, min(start + chunk, K))
        w, m, rest, lin = _chunk_components(draws, X, sl)
        w, m, rest, lin = w[:, 0, :], m[:, 0, :], rest[:, 0], lin[:, 0]
        v = phi[sl] * sigma_sq
        sd = np.sqrt(v)[:, None, None]
        dens = w[:, :, None] * np.exp(-0.5 * ((grid[None, None, :] - m[:, :, None]) / sd) ** 2) / (sd * math.sqrt(2 * math.pi))
        total += dens.sum(axis=(0, 1))
        vu = (v + s0[sl])[:, None]
        total += (rest[:, None] * np.exp(-0.5 * (grid[None, :] - lin[:, None]) ** 2 / vu)
                  / np.sqrt(2 * math.pi * vu)).sum(axis=0)
    return total / K
