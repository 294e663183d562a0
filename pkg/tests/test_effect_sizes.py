import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from bnpmeta.effect_sizes import (falconer_heritability, fisher_z, hedges_correction, hedges_g,
                                  log_odds_ratio)
from bnpmeta.errors import DegenerateError, DomainError, ZeroCellError


class TestHedges:
    def test_unit_difference(self):
        r = hedges_g(1.0, 0.0, 1.0, 1.0, 10, 10)
        assert r.es == pytest.approx(0.957746, abs=1e-6)
        assert r.var == pytest.approx(0.213513, abs=1e-6)

    def test_equal_means(self):
        c = hedges_correction(12, 8)
        r = hedges_g(3.0, 3.0, 2.0, 1.0, 12, 8)
        assert r.es == 0
        assert r.var == pytest.approx(20 / 96 * c, rel=1e-12)

    def test_zero_pooled_variance(self):
        with pytest.raises(DegenerateError):
            hedges_g(1.0, 0.0, 0.0, 0.0, 2, 2)

    def test_literature_variant_squares_correction(self):
        c = hedges_correction(10, 10)
        a = hedges_g(1.0, 0.0, 1.0, 1.0, 10, 10)
        b = hedges_g(1.0, 0.0, 1.0, 1.0, 10, 10, literature_variant=True)
        assert b.es == a.es and b.var == pytest.approx(a.var * c, rel=1e-12)

    @given(st.integers(4, 5000))
    def test_correction_monotone(self, total):
        c1 = hedges_correction(total // 2, total - total // 2)
        c2 = hedges_correction(total // 2 + 1, total - total // 2)
        assert 0 < c1 < c2 < 1


class TestFisher:
    def test_zero(self):
        r = fisher_z(0.0, 22)
        assert r.es == 0 and r.var == pytest.approx(0.04)

    def test_half(self):
        r = fisher_z(0.5, 50)
        assert r.es == pytest.approx(0.549306, abs=1e-6)
        assert r.var == pytest.approx(1 / 53)

    def test_boundary(self):
        with pytest.raises(DomainError):
            fisher_z(1.0, 10)

    def test_literature_variant(self):
        assert fisher_z(0.5, 50, literature_variant=True).var == pytest.approx(1 / 47)

    @given(st.floats(-0.999, 0.999), st.integers(1, 1000))
    def test_odd(self, rho, n):
        assert fisher_z(-rho, n).es == -fisher_z(rho, n).es


class TestLogOdds:
    def test_balanced(self):
        r = log_odds_ratio(10, 10, 10, 10)
        assert r.es == 0 and r.var == pytest.approx(0.4)

    def test_example(self):
        r = log_odds_ratio(20, 10, 10, 20)
        assert r.es == pytest.approx(1.386294, abs=1e-6)
        assert r.var == pytest.approx(0.3)

    def test_zero_cell(self):
        with pytest.raises(ZeroCellError):
            log_odds_ratio(0, 10, 10, 10)

    @given(*[st.integers(1, 500)] * 4)
    def test_row_swap_antisymmetric(self, a, b, c, d):
        r1 = log_odds_ratio(a, b, c, d)
        r2 = log_odds_ratio(c, d, a, b)
        assert r2.es == pytest.approx(-r1.es, abs=1e-12)
        assert r2.var == pytest.approx(r1.var, rel=1e-12)


class TestFalconer:
    def test_example(self):
        r = falconer_heritability(0.8, 100, 0.55, 100)
        assert r.es == pytest.approx(0.5, abs=1e-12)
        assert r.var == pytest.approx(0.0246442, abs=1e-6)

    def test_equal_correlations(self):
        assert falconer_heritability(0.4, 50, 0.4, 70).es == 0

    def test_negative_estimate_allowed(self):
        r = falconer_heritability(0.40, 80, 0.43, 90)
        assert r.es == pytest.approx(-0.06)
        assert r.var > 0

    @given(st.floats(-1, 1), st.floats(-1, 1), st.integers(1, 1000), st.integers(1, 1000))
    def test_variance_sign_invariant(self, a, b, n1, n2):
        v1 = falconer_heritability(a, n1, b, n2).var
        v2 = falconer_heritability(-a, n1, -b, n2).var
        assert math.isclose(v1, v2, rel_tol=1e-12, abs_tol=1e-300)
