"""Bayesian normal fixed-effects and random-effects meta-analysis models.

Supported kinds:

``FE``
    y_i ~ N(x_i'beta, s2_i).
``RE2L``
    adds a level-2 intercept per group (each report, or each study).
``RE2L-dep``
    level-2 intercepts per report with covariance sigma0^2 I + psi M, where
    M flags reports from the same study; (sigma0^2, psi) get the
    log-logistic x uniform prior.
``RE3L``
    per-report level-2 intercepts plus per-study level-3 intercepts.

All models are fit by a systematic-scan Gibbs sampler (coefficients and
inclusion indicators, then random intercepts, then variance parameters).
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import linalg, special

from .core_data import MetaDataset, build_relatedness, group_index
from .draws import MCMCConfig, PosteriorDraws
from .errors import DomainError, NumericalError
from .samplers import VariancePrior, mvn_from_precision

NORMAL_KINDS = ("FE", "RE2L", "RE2L-dep", "RE3L")
COVARIATE_MODES = ("none", "all", "spike-slab")
VARIANCE_PRIORS = ("uniform", "invgamma", "half-t")


@dataclass(frozen=True)
class PriorConfig:
    """Prior hyperparameters shared by all models.

    Defaults are the common-footing settings: diffuse N(0, 1e5) intercept
    and (non-selected) slopes, spike/slab variances .001/10 with prior
    inclusion probability .5, Un(0, 100) on random-intercept standard
    deviations.  The last four fields only concern the nonparametric model.
    """

    v_intercept: float = 1e5
    v_slope: float = 1e5
    v0: float = 0.001
    v1: float = 10.0
    bernoulli_p: float = 0.5
    b0: float = 100.0
    b00: float = 100.0
    variance_prior: str = "uniform"
    ig_eps: float = 0.001
    half_t_df: float = 1.0
    half_t_scale: float = 1.0
    a_phi: float = 0.5
    beta_omega_scale: float = 1e5
    sigma_omega_shape: float = 1.0
    sigma_omega_rate: float = 1.0

    def __post_init__(self):
        for name, value in asdict(self).items():
            if name != "variance_prior" and not value > 0:
                raise DomainError(f"prior hyperparameter {name} must be positive")
        if not self.bernoulli_p < 1:
            raise DomainError("bernoulli_p must lie in (0, 1)")
        if self.v1 / self.v0 > 10_000:
            raise DomainError("slab/spike variance ratio v1/v0 must not exceed 10000")
        if self.variance_prior not in VARIANCE_PRIORS:
            raise DomainError(f"unknown variance prior {self.variance_prior!r}")

    def sd_prior(self, level: int = 2) -> VariancePrior:
        scale = self.b0 if level == 2 else self.b00
        if self.variance_prior == "half-t":
            scale = self.half_t_scale
        return VariancePrior(self.variance_prior, scale=scale, eps=self.ig_eps, df=self.half_t_df)


@dataclass(frozen=True)
class NormalModelSpec:
    kind: str = "FE"
    grouping: str = "by-report"
    covariate_mode: str = "none"
    priors: PriorConfig = field(default_factory=PriorConfig)

    def __post_init__(self):
        if self.kind not in NORMAL_KINDS:
            raise DomainError(f"unknown normal model kind {self.kind!r}")
        if self.covariate_mode not in COVARIATE_MODES:
            raise DomainError(f"unknown covariate mode {self.covariate_mode!r}")
        if self.grouping not in ("by-report", "by-study"):
            raise DomainError(f"unknown grouping {self.grouping!r}")


@dataclass
class NormalState:
    beta: np.ndarray
    gamma: np.ndarray
    mu0: np.ndarray
    mu00: np.ndarray
    sigma0_sq: float = 0.0
    sigma00_sq: float = 0.0
    psi: float = 0.0


class NormalProblem:
    """Data and structure for one model/dataset pair, precomputed once.

    ``y`` may be reassigned (joint-distribution tests simulate new data).
    """

    def __init__(self, spec: NormalModelSpec, d: MetaDataset):
        self.spec = spec
        self.n = d.n
        self.y = d.y.copy()
        self.s2 = d.var.copy()
        self.w = 1.0 / self.s2
        full = d.design()
        self.columns = (0,) if spec.covariate_mode == "none" else tuple(range(d.p + 1))
        self.X = full[:, self.columns]
        self.q = self.X.shape[1]
        self.p_ss = self.q - 1 if spec.covariate_mode == "spike-slab" else 0
        self.XtWX = self.X.T @ (self.w[:, None] * self.X)
        self.XtW = self.X.T * self.w

        kind = spec.kind
        self.group = np.zeros(self.n, dtype=int)
        self.G = 0
        self.study = np.zeros(self.n, dtype=int)
        self.T = 0
        self.M = None
        self.K = 1
        self.c0 = math.sqrt(self.n / float(np.sum(self.w)))
        if kind == "RE2L":
            self.group, _ = group_index(d, spec.grouping)
            self.G = int(self.group.max()) + 1
        elif kind in ("RE2L-dep", "RE3L"):
            self.group = np.arange(self.n)
            self.G = self.n
        if kind == "RE2L-dep":
            rel = build_relatedness(d, "by-study")
            self.M = np.array(rel.M)
            self.K = rel.K
        if kind == "RE3L":
            self.study, labels = group_index(d, "by-study")
            self.T = len(labels)
            if self.T > self.n:
                raise DomainError("more level-3 groups than reports")
        self.group_w = np.bincount(self.group, weights=self.w, minlength=self.G) if self.G else None
        self.study_w = np.bincount(self.study, weights=self.w, minlength=self.T) if self.T else None

    def prior_variances(self, gamma: np.ndarray, priors: PriorConfig) -> np.ndarray:
        v = np.full(self.q, priors.v_slope)
        v[0] = priors.v_intercept
        if self.p_ss:
            v[1:] = np.where(gamma > 0, priors.v1, priors.v0)
        return v

    def offsets(self, state: NormalState) -> np.ndarray:
        """Sum of random intercepts attached to each report."""
        off = np.zeros(self.n)
        if self.G:
            off += state.mu0[self.group]
        if self.T:
            off += state.mu00[self.study]
        return off


def ssvs_inclusion_prob(beta_k, v0, v1, p, scale=1.0):
    """Pr(gamma_k = 1 | beta_k) under a N(0, scale*v1) slab vs N(0, scale*v0) spike."""
    beta_k = np.asarray(beta_k, dtype=float)
    log_slab = math.log(p) - 0.5 * math.log(scale * v1) - beta_k**2 / (2 * scale * v1)
    log_spike = math.log1p(-p) - 0.5 * math.log(scale * v0) - beta_k**2 / (2 * scale * v0)
    return special.expit(log_slab - log_spike)


def update_beta_gamma(state: NormalState, prob: NormalProblem, priors: PriorConfig,
                      rng: np.random.Generator) -> NormalState:
    """Exact Gaussian draw of beta, then SSVS Bernoulli draws of gamma."""
    r = prob.y - prob.offsets(state)
    V = prob.prior_variances(state.gamma, priors)
    P = prob.XtWX + np.diag(1.0 / V)
    state.beta, _ = mvn_from_precision(P, prob.XtW @ r, rng, "coefficient")
    if prob.p_ss:
        pi = ssvs_inclusion_prob(state.beta[1:], priors.v0, priors.v1, priors.bernoulli_p)
        state.gamma = (rng.uniform(size=prob.p_ss) < pi).astype(np.int8)
    return state


def intercept_conditional(prob: NormalProblem, resid: np.ndarray, sigma0_sq: float, psi: float = 0.0):
    """Mean and covariance of the level-2 intercepts given residuals.

    Dense form used for the dependent model; with ``psi = 0`` it reduces to
    the independent per-group update.
    """
    n = prob.n
    Sigma0 = sigma0_sq * np.eye(n) + (psi * prob.M if prob.M is not None else 0.0)
    cf = _chol_or_none(Sigma0)
    if cf is None:
        raise NumericalError("sigma0^2 I + psi M is not positive definite")
    P = np.diag(prob.w) + linalg.cho_solve((cf, True), np.eye(n))
    cov = linalg.inv(P)
    return cov @ (prob.w * resid), cov


def _chol_or_none(A):
    try:
        return linalg.cholesky(A, lower=True)
    except linalg.LinAlgError:
        return None


def update_random_intercepts(state: NormalState, prob: NormalProblem,
                             rng: np.random.Generator) -> NormalState:
    kind = prob.spec.kind
    if kind == "FE":
        return state
    lin = prob.X @ state.beta
    if kind == "RE2L-dep":
        resid = prob.y - lin
        n = prob.n
        Sigma0 = state.sigma0_sq * np.eye(n) + state.psi * prob.M
        cf = _chol_or_none(Sigma0)
        if cf is None:
            raise NumericalError("sigma0^2 I + psi M is not positive definite")
        P = np.diag(prob.w) + linalg.cho_solve((cf, True), np.eye(n))
        state.mu0, _ = mvn_from_precision(P, prob.w * resid, rng, "random-intercept")
        return state

    resid = prob.y - lin - (state.mu00[prob.study] if prob.T else 0.0)
    state.mu0 = _grouped_normal_draw(prob.group, prob.w, resid, prob.group_w, state.sigma0_sq, rng)
    if kind == "RE3L":
        resid = prob.y - lin - state.mu0[prob.group]
        state.mu00 = _grouped_normal_draw(prob.study, prob.w, resid, prob.study_w, state.sigma00_sq, rng)
    return state


def _grouped_normal_draw(group, w, resid, group_w, var, rng):
    """Independent conjugate draws of N(0, var) group effects."""
    G = group_w.size
    if var <= 0:
        return np.zeros(G)
    prec = group_w + 1.0 / var
    mean = np.bincount(group, weights=w * resid, minlength=G) / prec
    return mean + rng.standard_normal(G) / np.sqrt(prec)


# --- dependent level-2 prior on (sigma0^2, psi) -------------------------------

def loglogistic_logpdf(s2: float, c0: float) -> float:
    """Log density c0 / (c0 + s2)^2 of a log-logistic variance prior."""
    if s2 <= 0:
        return -np.inf
    return math.log(c0) - 2.0 * math.log(c0 + s2)


def loglogistic_quantile(q, c0: float):
    q = np.asarray(q, dtype=float)
    return c0 * q / (1.0 - q)


def psi_support(sigma0_sq: float, K: int) -> tuple[float, float]:
    return -sigma0_sq / (K - 1), sigma0_sq


def _dep_to_unconstrained(s2, psi, K):
    lo, hi = psi_support(s2, K)
    frac = (psi - lo) / (hi - lo)
    return math.log(s2), math.log(frac) - math.log1p(-frac)


def _dep_from_unconstrained(u, v, K):
    s2 = math.exp(u)
    lo, hi = psi_support(s2, K)
    return s2, lo + (hi - lo) * special.expit(v)


def _mvn0_logpdf(x, Sigma):
    cf = _chol_or_none(Sigma)
    if cf is None:
        return -np.inf
    z = linalg.solve_triangular(cf, x, lower=True)
    return -0.5 * (z @ z) - np.sum(np.log(np.diag(cf))) - 0.5 * x.size * math.log(2 * math.pi)


def dep_log_target(u: float, v: float, mu0: np.ndarray, prob: NormalProblem) -> float:
    """Log full conditional of (log sigma0^2, logit psi-position), Jacobian included."""
    K = prob.K
    s2, psi = _dep_from_unconstrained(u, v, K)
    if not (s2 > 0 and np.isfinite(s2)):
        return -np.inf
    Sigma = s2 * np.eye(prob.n) + psi * prob.M
    # prior density c0/(c0+s2)^2 * 1/(hi-lo); Jacobian s2 * (hi-lo) * sigmoid'(v)
    log_jac_prior = loglogistic_logpdf(s2, prob.c0) + u + _log_sigmoid_deriv(v)
    return log_jac_prior + _mvn0_logpdf(mu0, Sigma)


def _log_sigmoid_deriv(v):
    return -np.logaddexp(0.0, v) - np.logaddexp(0.0, -v)


@dataclass
class MetropolisTuner:
    """Random-walk step size adapted during burn-in only."""

    step: float = 0.5
    accepted: int = 0
    proposed: int = 0
    window_acc: int = 0
    window_n: int = 0
    adapt: bool = True

    def record(self, acc: bool):
        self.proposed += 1
        self.accepted += int(acc)
        if self.adapt:
            self.window_n += 1
            self.window_acc += int(acc)
            if self.window_n == 50:
                rate = self.window_acc / 50
                self.step *= math.exp(rate - 0.35)
                self.window_acc = self.window_n = 0


def update_variances(state: NormalState, prob: NormalProblem, priors: PriorConfig,
                     rng: np.random.Generator, tuner: MetropolisTuner | None = None) -> NormalState:
    kind = prob.spec.kind
    if kind == "FE":
        return state
    if kind in ("RE2L", "RE3L"):
        s = prior_sd = priors.sd_prior(2)
        sd = s.update_sd(float(state.mu0 @ state.mu0), prob.G, math.sqrt(state.sigma0_sq), rng)
        state.sigma0_sq = sd * sd
        if kind == "RE3L":
            prior_sd = priors.sd_prior(3)
            sd = prior_sd.update_sd(float(state.mu00 @ state.mu00), prob.T, math.sqrt(state.sigma00_sq), rng)
            state.sigma00_sq = sd * sd
        return state

    tuner = tuner or MetropolisTuner(adapt=False)
    if prob.K < 2:
        # no related pairs: psi has no effect and stays at 0
        u = math.log(state.sigma0_sq)
        u_new = u + tuner.step * rng.standard_normal()

        def lt(uu):
            s2 = math.exp(uu)
            return loglogistic_logpdf(s2, prob.c0) + uu - 0.5 * prob.G * uu - 0.5 * (state.mu0 @ state.mu0) / s2

        acc = math.log(rng.uniform()) < lt(u_new) - lt(u)
        if acc:
            state.sigma0_sq = math.exp(u_new)
        tuner.record(acc)
        return state

    u, v = _dep_to_unconstrained(state.sigma0_sq, state.psi, prob.K)
    cur = dep_log_target(u, v, state.mu0, prob)
    u_new, v_new = np.array([u, v]) + tuner.step * rng.standard_normal(2)
    new = dep_log_target(u_new, v_new, state.mu0, prob)
    acc = bool(np.isfinite(new) and math.log(rng.uniform()) < new - cur)
    if acc:
        state.sigma0_sq, state.psi = _dep_from_unconstrained(u_new, v_new, prob.K)
    tuner.record(acc)
    return state


# --- prediction ---------------------------------------------------------------

def predictive_moments_per_draw(state: NormalState, x, sigma_sq: float, kind: str = "RE3L"):
    """Mean x'beta and variance sigma_sq + sigma0^2 + sigma00^2 of one draw.

    Variance terms absent from ``kind`` are left out.
    """
    mean = float(np.dot(np.asarray(x, dtype=float)[: state.beta.size], state.beta))
    var = sigma_sq
    if kind != "FE":
        var += state.sigma0_sq
    if kind == "RE3L":
        var += state.sigma00_sq
    return mean, var


def predictive_moments_draws(draws: PosteriorDraws, X_full: np.ndarray, s2, sl: slice = slice(None)):
    """Per-draw predictive means and variances for draws ``sl``, shape (k, m)."""
    X = np.atleast_2d(X_full)[:, list(draws.columns)]
    means = draws.params["beta"][sl] @ X.T
    extra = np.zeros(means.shape[0])
    if draws.kind != "FE":
        extra = extra + draws.params["sigma0_sq"][sl]
    if draws.kind == "RE3L":
        extra = extra + draws.params["sigma00_sq"][sl]
    var = np.asarray(s2, dtype=float)[None, :] + extra[:, None]
    return means, var


# --- prior simulation (joint-distribution checks, synthetic data) ------------

def sample_prior(prob: NormalProblem, priors: PriorConfig, rng: np.random.Generator) -> NormalState:
    kind = prob.spec.kind
    gamma = (rng.uniform(size=prob.p_ss) < priors.bernoulli_p).astype(np.int8)
    V = prob.prior_variances(gamma, priors)
    beta = rng.standard_normal(prob.q) * np.sqrt(V)
    st = NormalState(beta=beta, gamma=gamma, mu0=np.zeros(prob.G), mu00=np.zeros(prob.T))
    if kind in ("RE2L", "RE3L"):
        st.sigma0_sq = priors.sd_prior(2).sample_prior_sd(rng) ** 2
        st.mu0 = rng.standard_normal(prob.G) * math.sqrt(st.sigma0_sq)
    if kind == "RE3L":
        st.sigma00_sq = priors.sd_prior(3).sample_prior_sd(rng) ** 2
        st.mu00 = rng.standard_normal(prob.T) * math.sqrt(st.sigma00_sq)
    if kind == "RE2L-dep":
        q = rng.uniform()
        st.sigma0_sq = float(loglogistic_quantile(q, prob.c0))
        if prob.K >= 2:
            lo, hi = psi_support(st.sigma0_sq, prob.K)
            st.psi = float(rng.uniform(lo, hi))
        Sigma = st.sigma0_sq * np.eye(prob.n) + st.psi * prob.M
        st.mu0 = linalg.cholesky(Sigma, lower=True) @ rng.standard_normal(prob.n)
    return st


def simulate_y(state: NormalState, prob: NormalProblem, rng: np.random.Generator) -> np.ndarray:
    mean = prob.X @ state.beta + prob.offsets(state)
    return mean + rng.standard_normal(prob.n) * np.sqrt(prob.s2)


# --- driver ------------------------------------------------------------------

def initial_state(prob: NormalProblem, priors: PriorConfig) -> NormalState:
    beta = np.linalg.solve(prob.XtWX + 1e-8 * np.eye(prob.q), prob.XtW @ prob.y)
    spread = float(np.std(prob.y)) if prob.n > 1 else 1.0
    sd0 = min(0.5 * priors.b0, max(spread, 1e-2))
    if priors.variance_prior == "half-t":
        sd0 = max(spread, 1e-2)
    st = NormalState(
        beta=beta,
        gamma=np.ones(prob.p_ss, dtype=np.int8),
        mu0=np.zeros(prob.G),
        mu00=np.zeros(prob.T),
    )
    if prob.spec.kind != "FE":
        st.sigma0_sq = sd0**2
    if prob.spec.kind == "RE3L":
        st.sigma00_sq = min(0.5 * priors.b00, max(spread, 1e-2)) ** 2
    if prob.spec.kind == "RE2L-dep":
        st.sigma0_sq = max(prob.c0, 1e-3)
    return st


def sweep(state: NormalState, prob: NormalProblem, priors: PriorConfig, rng: np.random.Generator,
          tuner: MetropolisTuner | None = None) -> NormalState:
    update_beta_gamma(state, prob, priors, rng)
    update_random_intercepts(state, prob, rng)
    update_variances(state, prob, priors, rng, tuner)
    return state


def fit_normal(spec: NormalModelSpec, d: MetaDataset, mcmc: MCMCConfig,
               init: NormalState | None = None) -> PosteriorDraws:
    """Run one chain and return the retained draws (deterministic given the seed)."""
    t0 = time.perf_counter()
    prob = NormalProblem(spec, d)
    priors = spec.priors
    rng = np.random.default_rng(mcmc.seed)
    state = init or initial_state(prob, priors)
    tuner = MetropolisTuner() if spec.kind == "RE2L-dep" else None

    keep = mcmc.keep
    out = {
        "beta": np.empty((keep, prob.q)),
        "gamma": np.empty((keep, prob.p_ss), dtype=np.int8),
        "sigma0_sq": np.zeros(keep),
        "sigma00_sq": np.zeros(keep),
        "psi": np.zeros(keep),
    }
    k = 0
    for it in range(mcmc.iterations):
        if tuner is not None and it == mcmc.burn:
            tuner.adapt = False
            tuner.accepted = tuner.proposed = 0
        sweep(state, prob, priors, rng, tuner)
        if mcmc.retained(it):
            out["beta"][k] = state.beta
            out["gamma"][k] = state.gamma
            out["sigma0_sq"][k] = state.sigma0_sq
            out["sigma00_sq"][k] = state.sigma00_sq
            out["psi"][k] = state.psi
            k += 1
        if not np.all(np.isfinite(state.beta)):
            raise NumericalError(f"non-finite coefficients at iteration {it}: last state {state}")

    meta = {
        "model": spec.kind,
        "grouping": spec.grouping,
        "covariate_mode": spec.covariate_mode,
        "priors": asdict(priors),
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
    }
    if spec.kind == "RE2L-dep":
        meta.update(c0=prob.c0, K=prob.K, K_convention="group-size (max row sum of M + 1)",
                    mh_step=tuner.step, mh_acceptance=tuner.accepted / max(tuner.proposed, 1))
    if spec.kind == "RE2L":
        meta["groups"] = prob.G
    if spec.kind == "RE3L":
        meta["level3_groups"] = prob.T
    return PosteriorDraws(kind=spec.kind, params=out, meta=meta, columns=prob.columns)
