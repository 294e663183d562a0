"""Joint-distribution ("getting it right") checks for the Gibbs samplers.

Two ways of sampling the joint distribution of parameters and data are
compared on a set of scalar functions of the parameters:

* marginal-conditional: independent draws of the parameters from the prior;
* successive-conditional: alternate one sampler sweep given the data with a
  fresh draw of the data given the parameters.

If the sampler leaves the posterior invariant, both give the prior moments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import bnp_model, normal_models
from .core_data import MetaDataset
from .model_eval import mc_diagnostics


@dataclass
class GewekeResult:
    names: tuple
    prior_mean: np.ndarray
    chain_mean: np.ndarray
    z: np.ndarray

    def max_abs_z(self) -> float:
        return float(np.max(np.abs(self.z)))

    def __str__(self) -> str:
        rows = [f"{n:>14}: prior {a: .4f}  chain {b: .4f}  z {c: .2f}"
                for n, a, b, c in zip(self.names, self.prior_mean, self.chain_mean, self.z)]
        return "\n".join(rows)


def _z_scores(prior_vals: np.ndarray, chain_vals: np.ndarray):
    m1 = prior_vals.mean(axis=0)
    se1 = prior_vals.std(axis=0, ddof=1) / math.sqrt(prior_vals.shape[0])
    m2 = chain_vals.mean(axis=0)
    se2 = np.array([mc_diagnostics(chain_vals[:, k]).mcse for k in range(chain_vals.shape[1])])
    denom = np.sqrt(se1**2 + se2**2)
    z = np.where(denom > 0, (m2 - m1) / np.where(denom > 0, denom, 1.0), 0.0)
    return m1, m2, z


def geweke_test(sample_prior, simulate_y, sweep, scalars, names, set_y, n_prior: int, n_chain: int,
                rng: np.random.Generator) -> GewekeResult:
    """Generic driver; the callables close over one model's problem object."""
    prior_vals = np.array([scalars(sample_prior(rng)) for _ in range(n_prior)])
    state = sample_prior(rng)
    chain_vals = np.empty((n_chain, len(names)))
    for t in range(n_chain):
        set_y(simulate_y(state, rng))
        sweep(state, rng)
        chain_vals[t] = scalars(state)
    m1, m2, z = _z_scores(prior_vals, chain_vals)
    return GewekeResult(tuple(names), m1, m2, z)


def normal_geweke(spec: normal_models.NormalModelSpec, d: MetaDataset, n_prior: int, n_chain: int,
                  seed: int = 0) -> GewekeResult:
    prob = normal_models.NormalProblem(spec, d)
    priors = spec.priors
    names = ["beta0"] + [f"beta{k}" for k in range(1, prob.q)] + [f"gamma{k}" for k in range(1, prob.p_ss + 1)]
    if spec.kind != "FE":
        names.append("sigma0")
    if spec.kind == "RE3L":
        names.append("sigma00")

    def scalars(st):
        v = list(st.beta) + list(st.gamma.astype(float))
        if spec.kind != "FE":
            v.append(math.sqrt(st.sigma0_sq))
        if spec.kind == "RE3L":
            v.append(math.sqrt(st.sigma00_sq))
        return v

    tuner = normal_models.MetropolisTuner(adapt=False)

    def set_y(y):
        prob.y = y

    return geweke_test(
        lambda rng: normal_models.sample_prior(prob, priors, rng),
        lambda st, rng: normal_models.simulate_y(st, prob, rng),
        lambda st, rng: normal_models.sweep(st, prob, priors, rng, tuner),
        scalars, names, set_y, n_prior, n_chain, np.random.default_rng(seed),
    )


def bnp_geweke(d: MetaDataset, priors: normal_models.PriorConfig, n_prior: int, n_chain: int,
               covariate_mode: str = "spike-slab", seed: int = 0) -> GewekeResult:
    prob = bnp_model.BNPProblem(d, covariate_mode)
    names = (["beta0"] + [f"beta{k}" for k in range(1, prob.q)]
             + [f"gamma{k}" for k in range(1, prob.p_ss + 1)]
             + ["log_phi", "sigma0", "log_sigma_omega", "beta_omega0", "n_occupied"])

    def scalars(st):
        return (list(st.beta) + list(st.gamma.astype(float))
                + [math.log(st.phi), math.sqrt(st.sigma0_sq), math.log(st.sigma_omega),
                   float(st.beta_omega[0]), float(len(st.mu0))])

    def set_y(y):
        prob.y = y

    return geweke_test(
        lambda rng: bnp_model.sample_prior_bnp(prob, priors, rng),
        lambda st, rng: bnp_model.simulate_y_bnp(st, prob, rng),
        lambda st, rng: bnp_model.sweep(st, prob, priors, rng),
        scalars, names, set_y, n_prior, n_chain, np.random.default_rng(seed),
    )


def geweke_dataset(n: int = 10, p: int = 1, seed: int = 0) -> MetaDataset:
    """Fixed covariates and sampling variances for joint-distribution tests."""
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, p))
    s2 = rng.uniform(0.5, 1.5, n)
    return MetaDataset(np.zeros(n), s2, [f"s{i // 2}" for i in range(n)], [f"r{i}" for i in range(n)], X,
                       [f"x{k + 1}" for k in range(p)])


GEWEKE_PRIORS = normal_models.PriorConfig(
    v_intercept=1.0, v_slope=1.0, v0=0.05, v1=1.0, b0=1.0, b00=1.0, a_phi=10.0,
    beta_omega_scale=1.0, sigma_omega_shape=2.0, sigma_omega_rate=2.0,
)
