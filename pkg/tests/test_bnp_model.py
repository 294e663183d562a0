import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from conftest import make_dataset

from bnpmeta.bnp_model import (BNPProblem, BNPState, PREDICTIVE_WINDOW, fit_bnp, initial_state,
                               mixture_weights, predictive_moments_bnp, predictive_moments_draws_bnp,
                               sweep, telescoped_mass, update_allocations, update_beta_gamma_bnp,
                               update_intercepts_bnp, update_latent_probit, update_phi, update_sigma0_bnp,
                               update_weight_regression, weight_regression_posterior)
from bnpmeta.draws import MCMCConfig
from bnpmeta.errors import DomainError
from bnpmeta.model_eval import SyntheticSpec, generate_synthetic, mc_diagnostics, predictive_summary
from bnpmeta.normal_models import PriorConfig
from bnpmeta.testing import GEWEKE_PRIORS, bnp_geweke, geweke_dataset


def make_state(n, q=1, **kw):
    s = BNPState(beta=np.zeros(q), gamma=np.zeros(q - 1, dtype=np.int8), mu0={1: 0.0}, phi=1.0, sigma0_sq=1.0,
                 beta_omega=np.zeros(q), sigma_omega=1.0, alloc=np.ones(n, dtype=int), z=np.full(n, 0.5))
    for k, v in kw.items():
        setattr(s, k, v)
    return s


class TestMixtureWeights:
    def test_degenerate_scale(self):
        w = mixture_weights(0.5, 1e-8)
        assert w[1] == pytest.approx(1.0, abs=1e-12)
        assert sum(v for j, v in w.items() if j != 1) < 1e-12

    def test_standard_cell(self):
        assert mixture_weights(0.0, 1.0)[0] == pytest.approx(0.341345, abs=1e-6)

    def test_spread_grows_with_scale(self):
        counts = [sum(v > 0.05 for v in mixture_weights(0.7, s).values()) for s in (1 / 20, 1 / 2, 1, 2)]
        assert counts == sorted(counts)
        assert counts[0] == 1 and counts[-1] > 3

    @settings(max_examples=300, deadline=None)
    @given(st.floats(-50, 50), st.floats(1e-6, 20))
    def test_normalization(self, eta, so):
        w = mixture_weights(eta, so, PREDICTIVE_WINDOW)
        total = math.fsum(w.values())
        assert abs(total - 1) < 1e-12
        lo, hi = min(w), max(w)
        assert total == pytest.approx(telescoped_mass(lo, hi, eta, so), abs=1e-14)

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5, 5), st.floats(0.05, 5), st.integers(0, 6))
    def test_telescoping_symmetric_range(self, eta, so, J):
        direct = math.fsum(stats.norm.cdf((j - eta) / so) - stats.norm.cdf((j - 1 - eta) / so)
                           for j in range(-J, J + 1))
        assert telescoped_mass(-J, J, eta, so) == pytest.approx(direct, abs=1e-14)

    @pytest.mark.parametrize("W", [1, 2, 4, 6])
    def test_tail_bound(self, W):
        for eta, so in [(0.3, 0.7), (-4.2, 3.0), (10.0, 0.01)]:
            assert 1 - math.fsum(mixture_weights(eta, so, W).values()) <= 2 * stats.norm.cdf(-W) + 1e-15

    def test_bad_arguments(self):
        with pytest.raises(DomainError):
            mixture_weights(0.0, 1.0, window=0)
        with pytest.raises(DomainError):
            mixture_weights(0.0, 0.0)


class TestAllocations:
    def test_flat_likelihood_frequencies_match_weights(self):
        n = 2000
        d = make_dataset(np.zeros(n), np.full(n, 1e12))
        prob = BNPProblem(d, "none")
        rng = np.random.default_rng(0)
        eta, so = 0.3, 0.8
        counts = {}
        for _ in range(50):
            s = make_state(n, beta_omega=np.array([eta]), sigma_omega=so, sigma0_sq=1e-4)
            update_allocations(s, prob, 6, rng)
            for j, c in zip(*np.unique(s.alloc, return_counts=True)):
                counts[int(j)] = counts.get(int(j), 0) + int(c)
        total = sum(counts.values())
        for j, w in mixture_weights(eta, so).items():
            assert abs(counts.get(j, 0) / total - w) < 0.01

    def test_single_weight(self, rng):
        prob = BNPProblem(make_dataset(np.zeros(30), np.ones(30)), "none")
        s = make_state(30, beta_omega=np.array([0.5]), sigma_omega=1e-8)
        update_allocations(s, prob, 6, rng)
        assert np.all(s.alloc == 1)

    def test_two_separated_intercepts(self, rng):
        prob = BNPProblem(make_dataset(np.full(2000, 3.0), np.full(2000, 0.01)), "none")
        hits = 0
        for _ in range(5):
            s = make_state(2000, mu0={0: -3.0, 1: 3.0}, sigma0_sq=1e-6, sigma_omega=0.5)
            update_allocations(s, prob, 6, rng)
            hits += np.sum(s.alloc == 1)
        assert hits / 10000 > 0.999

    def test_latent_in_cell_and_degenerate(self, rng):
        prob = BNPProblem(make_dataset(np.zeros(50), np.ones(50)), "none")
        s = make_state(50, alloc=rng.integers(-3, 4, 50), beta_omega=np.array([0.2]), sigma_omega=2.0)
        update_latent_probit(s, prob, rng)
        assert np.all((s.z > s.alloc - 1) & (s.z <= s.alloc))
        s = make_state(50, beta_omega=np.array([0.5]), sigma_omega=1e-9)
        update_latent_probit(s, prob, rng)
        np.testing.assert_allclose(s.z, 0.5, atol=1e-6)


class TestWeightRegression:
    def test_prior_only(self):
        priors = PriorConfig()
        L, m, shape, rate = weight_regression_posterior(np.zeros((0, 1)), np.zeros(0), priors)
        assert (shape, rate) == (1.0, 1.0)
        rng = np.random.default_rng(1)
        s = make_state(0)
        tau = []
        for _ in range(20000):
            update_weight_regression(s, np.zeros((0, 1)), priors, rng)
            tau.append(s.sigma_omega**-2)
        assert np.mean(tau) == pytest.approx(1.0, abs=0.03)
        assert np.var(tau) == pytest.approx(1.0, abs=0.1)

    def test_zero_latents_concentrate(self, rng):
        n = 5000
        s = make_state(n, z=np.zeros(n))
        update_weight_regression(s, np.ones((n, 1)), PriorConfig(), rng)
        assert s.sigma_omega < 0.05

    def test_recovery(self, rng):
        n = 500
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        truth, so = np.array([0.5, -1.0]), 0.7
        z = X @ truth + so * rng.standard_normal(n)
        s = make_state(n, q=2, z=z)
        bw, sw = [], []
        for _ in range(4000):
            update_weight_regression(s, X, PriorConfig(), rng)
            bw.append(s.beta_omega.copy())
            sw.append(s.sigma_omega)
        bw = np.array(bw)
        # posterior sd here is about so / sqrt(n)
        np.testing.assert_allclose(bw.mean(axis=0), truth, atol=3 * so / math.sqrt(n))
        assert np.mean(sw) == pytest.approx(so, abs=3 * so / math.sqrt(2 * n))


class TestIntercepts:
    def test_single_member(self):
        prob = BNPProblem(make_dataset([2.0], [1.0]), "none")
        rng = np.random.default_rng(0)
        out = []
        for _ in range(20000):
            s = make_state(1)
            update_intercepts_bnp(s, prob, rng)
            out.append(s.mu0[1])
        assert np.mean(out) == pytest.approx(1.0, abs=0.02)
        assert np.var(out) == pytest.approx(0.5, rel=0.05)

    def test_large_occupancy(self, rng):
        n = 20000
        prob = BNPProblem(make_dataset(np.full(n, 1.7), np.ones(n)), "none")
        s = make_state(n)
        update_intercepts_bnp(s, prob, rng)
        assert s.mu0[1] == pytest.approx(1.7, abs=0.05)

    def test_joint_block_shifts_level(self, rng):
        # only the sum of intercept and component intercept is identified by the data
        n = 400
        prob = BNPProblem(make_dataset(np.full(n, 2.0), np.full(n, 0.01)), "none")
        s = make_state(n)
        tot = []
        for _ in range(200):
            update_beta_gamma_bnp(s, prob, PriorConfig(), rng)
            tot.append(s.beta[0] + s.mu0[1])
        assert np.mean(tot) == pytest.approx(2.0, abs=0.01)


class TestScaleUpdates:
    def test_phi_perfect_fit(self):
        n = 40
        prob = BNPProblem(make_dataset(np.zeros(n), np.ones(n)), "none")
        priors = PriorConfig(a_phi=0.5)
        rng = np.random.default_rng(0)
        inv = []
        for _ in range(20000):
            s = make_state(n, mu0={1: 0.0})
            update_phi(s, prob, priors, rng)
            inv.append(1 / s.phi)
        shape, rate = 0.25 + n / 2, 0.25
        assert np.mean(inv) == pytest.approx(shape / rate, rel=0.02)
        assert np.mean(np.array(inv) ** -1) < 1

    def test_phi_tight_prior(self, rng):
        prob = BNPProblem(make_dataset(rng.normal(size=20), np.ones(20)), "none")
        s = make_state(20)
        out = [update_phi(s, prob, PriorConfig(a_phi=1e7), rng).phi for _ in range(200)]
        np.testing.assert_allclose(out, 1.0, atol=0.01)

    def test_sigma0_concentrates(self):
        rng = np.random.default_rng(2)
        mu = {j: (2.0 if j % 2 else -2.0) for j in range(50)}
        s = make_state(1, mu0=dict(mu), sigma0_sq=1.0)
        draws = []
        for _ in range(5000):
            update_sigma0_bnp(s, PriorConfig(), rng)
            draws.append(math.sqrt(s.sigma0_sq))
        # numerical oracle: the density sigma^-50 exp(-200 / (2 sigma^2)) on (0, 100)
        g = np.linspace(0.5, 10, 20001)
        dens = np.exp(-50 * np.log(g) - 100 / g**2 - (-50 * np.log(2) - 25))
        cdf = integrate.cumulative_trapezoid(dens, g, initial=0)
        med = np.interp(0.5, cdf / cdf[-1], g)
        assert abs(med - 2.0) < 0.2
        assert np.median(draws) == pytest.approx(med, abs=0.03)

    def test_sigma0_support(self, rng):
        s = make_state(1, mu0={1: 0.0}, sigma0_sq=1.0)
        for _ in range(300):
            update_sigma0_bnp(s, PriorConfig(b0=5.0), rng)
            assert 0 < s.sigma0_sq < 25


class TestPredictiveMoments:
    def test_dominant_weight(self):
        s = make_state(1, mu0={1: 0.3}, beta=np.array([0.2]), beta_omega=np.array([0.5]), sigma_omega=1e-8, phi=2.0)
        m, v = predictive_moments_bnp(s, [1.0], 0.01)
        assert (m, v) == pytest.approx((0.5, 0.02))

    def test_two_equal_weights(self):
        s = make_state(1, mu0={0: -1.0, 1: 1.0}, beta_omega=np.array([0.0]), sigma_omega=1e-9)
        m, v = predictive_moments_bnp(s, [1.0], 0.01)
        assert m == pytest.approx(0.0, abs=1e-9)
        assert v == pytest.approx(1.01, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.floats(-3, 3), st.floats(0.01, 3), st.floats(0.01, 3), st.floats(1e-3, 2))
    def test_variance_bound(self, eta, so, phi, s2):
        s = make_state(1, mu0={0: -1.0, 1: 0.5, 3: 2.0}, beta_omega=np.array([eta]), sigma_omega=so, phi=phi)
        assert predictive_moments_bnp(s, [1.0], s2)[1] >= phi * s2 * (1 - 1e-12)

    def test_vectorized_matches_per_state(self):
        d, _ = generate_synthetic(SyntheticSpec("bimodal", beta=(0.0,)), 40, 1, seed=1)
        draws = fit_bnp(d, mcmc=MCMCConfig(burn=100, keep=50, seed=3))
        X = np.array([[1.0, 0.0], [1.0, 1.2]])
        m, v = predictive_moments_draws_bnp(draws, X, [0.01, 0.2])
        p = draws.params
        for t in range(draws.keep):
            js, mu = draws.intercepts(t)
            s = make_state(1, q=2, beta=p["beta"][t], mu0=dict(zip(js.tolist(), mu.tolist())), phi=p["phi"][t],
                           sigma0_sq=p["sigma0_sq"][t], beta_omega=p["beta_omega"][t],
                           sigma_omega=p["sigma_omega"][t])
            for r, s2 in ((0, 0.01), (1, 0.2)):
                mm, vv = predictive_moments_bnp(s, X[r], s2)
                assert m[t, r] == pytest.approx(mm, abs=1e-9)
                assert v[t, r] == pytest.approx(vv, rel=1e-9, abs=1e-12)


class TestFit:
    def test_invariants_hold_every_sweep(self, rng):
        d, _ = generate_synthetic(SyntheticSpec("bimodal", beta=(0.0, 0.3)), 30, 2, seed=4)
        prob = BNPProblem(d)
        s = initial_state(prob, PriorConfig())
        for _ in range(300):
            sweep(s, prob, PriorConfig(), rng)
            s.check()

    def test_deterministic(self):
        d, _ = generate_synthetic(SyntheticSpec("bimodal", beta=(0.0,)), 30, 1, seed=2)
        a = fit_bnp(d, mcmc=MCMCConfig(burn=50, keep=100, seed=5))
        b = fit_bnp(d, mcmc=MCMCConfig(burn=50, keep=100, seed=5))
        for k in a.params:
            np.testing.assert_array_equal(a.params[k], b.params[k])
        assert a.meta["priors"]["b0"] == 100 and a.meta["window"] == 6

    def test_fixed_effects_data_predictive_mean(self):
        d, _ = generate_synthetic(SyntheticSpec("FE", beta=(0.5,)), 50, 0, seed=0)
        draws = fit_bnp(d, mcmc=MCMCConfig(burn=1000, keep=10000, seed=1))
        m, _ = predictive_moments_draws_bnp(draws, np.array([[1.0]]), [1e-4])
        w = 1 / d.var
        wmean = np.sum(w * d.y) / w.sum()
        assert abs(m[:, 0].mean() - wmean) < 3 * mc_diagnostics(m[:, 0]).mcse + 0.5 / math.sqrt(w.sum())
        E, _ = predictive_summary(draws, np.array([[1.0]]), [1e-4])
        assert E[0] == pytest.approx(m[:, 0].mean())


def test_joint_distribution_short():
    res = bnp_geweke(geweke_dataset(), GEWEKE_PRIORS, n_prior=5000, n_chain=5000, seed=3)
    assert res.max_abs_z() < 4, str(res)
