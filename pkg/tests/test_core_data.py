import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bnpmeta.core_data import (MetaDataset, Schema, build_relatedness, dataset_to_csv, group_index,
                               load_dataset, standardize_covariates)
from bnpmeta.errors import DegenerateCovariateError, DomainError, ParseError, SchemaError

from conftest import make_dataset

TWO_ROWS = b"y,var,study\n0.5,0.04,A\n0.3,0.09,A\n"


class TestLoadDataset:
    def test_two_rows(self):
        d = load_dataset(TWO_ROWS)
        assert d.n == 2 and d.p == 0
        np.testing.assert_array_equal(d.y, [0.5, 0.3])
        np.testing.assert_array_equal(d.var, [0.04, 0.09])
        assert d.study_id == ("A", "A")
        assert d.report_id == ("1", "2")

    def test_covariate_column_kept(self):
        d = load_dataset(b"y,var,study,age\n0.5,0.04,A,30\n0.3,0.09,A,41\n")
        assert d.p == 1 and d.covariate_names == ("age",)
        np.testing.assert_array_equal(d.covariates[:, 0], [30, 41])

    def test_negative_variance_names_row(self):
        with pytest.raises(DomainError, match="row 1"):
            load_dataset(b"y,var,study\n0.5,-1,A\n")

    def test_missing_column(self):
        with pytest.raises(SchemaError, match="var"):
            load_dataset(b"y,study\n0.5,A\n")

    def test_non_numeric_reports_row(self):
        with pytest.raises(ParseError, match="row 2"):
            load_dataset(b"y,var,study\n0.5,0.1,A\nabc,0.1,B\n")

    def test_missing_covariate_value(self):
        with pytest.raises(ParseError, match="row 1"):
            load_dataset(b"y,var,study,age\n0.5,0.1,A,\n")

    def test_exclude_and_explicit_covariates(self):
        raw = b"y,var,study,a,b,note\n1,1,A,1,2,3\n2,1,B,2,3,4\n"
        d = load_dataset(raw, Schema(exclude=("note",)))
        assert d.covariate_names == ("a", "b")
        d = load_dataset(raw, Schema(covariates=("b",)))
        assert d.covariate_names == ("b",)

    def test_deterministic_and_stream(self):
        a = load_dataset(TWO_ROWS)
        b = load_dataset(io.BytesIO(TWO_ROWS))
        assert a.fingerprint() == b.fingerprint()
        np.testing.assert_array_equal(a.y, b.y)

    def test_duplicate_report_ids(self):
        with pytest.raises(DomainError, match="unique"):
            load_dataset(b"y,var,study,rid\n1,1,A,x\n2,1,B,x\n", Schema(report="rid"))

    def test_round_trip_csv(self):
        d = make_dataset([0.1, -0.2, 0.3], [0.1, 0.2, 0.3], ["a", "a", "b"], [[1.5], [2.5], [0.25]], ["age"])
        back = load_dataset(dataset_to_csv(d).encode(), Schema(report="report"))
        np.testing.assert_array_equal(back.y, d.y)
        np.testing.assert_array_equal(back.covariates, d.covariates)
        assert back.report_id == d.report_id

    def test_dataset_is_immutable(self):
        d = load_dataset(TWO_ROWS)
        with pytest.raises(ValueError):
            d.y[0] = 3.0


class TestStandardize:
    def test_hand_example(self):
        d = make_dataset([0, 0, 0], [1, 1, 1], X=[[1], [2], [3]])
        s, info = standardize_covariates(d)
        np.testing.assert_allclose(s.covariates[:, 0], [-1, 0, 1])
        assert info.mean[0] == 2 and info.sd[0] == 1

    def test_idempotent(self):
        d = make_dataset([0, 0, 0], [1, 1, 1], X=[[-1], [0], [1]])
        s, info = standardize_covariates(d)
        np.testing.assert_allclose(s.covariates[:, 0], [-1, 0, 1])
        assert info.mean[0] == 0 and info.sd[0] == 1

    def test_constant_column_named(self):
        d = make_dataset([0, 0, 0], [1, 1, 1], X=[[5], [5], [5]], names=["dose"])
        with pytest.raises(DegenerateCovariateError, match="dose"):
            standardize_covariates(d)

    @settings(max_examples=50, deadline=None)
    @given(arrays(float, (12, 3), elements=st.floats(-1e3, 1e3, allow_nan=False)))
    def test_moments_and_inversion(self, X):
        if np.any(X.std(axis=0, ddof=1) < 1e-3):
            return
        d = make_dataset(np.zeros(12), np.ones(12), X=X)
        s, info = standardize_covariates(d)
        np.testing.assert_allclose(s.covariates.mean(axis=0), 0, atol=1e-9)
        np.testing.assert_allclose(s.covariates.var(axis=0, ddof=1), 1, rtol=1e-9)
        back = info.invert(s.covariates)
        np.testing.assert_allclose(back, X, rtol=1e-12, atol=1e-12 * np.abs(X).max())
        again = type(info).from_dict(info.to_dict())
        np.testing.assert_array_equal(again.apply(X), s.covariates)


class TestRelatedness:
    def test_small_example(self):
        d = make_dataset([0, 0, 0], [1, 1, 1], ["A", "A", "B"])
        r = build_relatedness(d)
        np.testing.assert_array_equal(r.M, [[0, 1, 0], [1, 0, 0], [0, 0, 0]])
        assert r.K == 2

    def test_distinct_studies(self):
        d = make_dataset([0, 0, 0], [1, 1, 1], ["A", "B", "C"])
        r = build_relatedness(d)
        assert not r.M.any() and r.K == 1

    def test_largest_study_of_ten(self):
        # 71 reports in 29 studies with at most 10 reports per study
        sizes = [10, 9, 6, 4, 4, 3, 3, 3] + [2] * 8 + [1] * 13
        assert sum(sizes) == 71 and len(sizes) == 29
        study = [f"s{k}" for k, m in enumerate(sizes) for _ in range(m)]
        r = build_relatedness(make_dataset(np.zeros(71), np.ones(71), study))
        assert r.K == 10

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(0, 4), min_size=2, max_size=15), st.randoms())
    def test_permutation_equivariant(self, labels, rnd):
        study = [f"s{v}" for v in labels]
        n = len(study)
        perm = list(range(n))
        rnd.shuffle(perm)
        r = build_relatedness(make_dataset(np.zeros(n), np.ones(n), study))
        rp = build_relatedness(make_dataset(np.zeros(n), np.ones(n), [study[i] for i in perm]))
        np.testing.assert_array_equal(rp.M, r.M[np.ix_(perm, perm)])
        assert rp.K == r.K
        assert np.array_equal(r.M, r.M.T) and not np.diag(r.M).any()


def test_group_index_first_appearance():
    d = make_dataset([0] * 4, [1] * 4, ["b", "a", "b", "c"])
    g, labels = group_index(d, "by-study")
    np.testing.assert_array_equal(g, [0, 1, 0, 2])
    assert labels == ("b", "a", "c")
    g, _ = group_index(d, "by-report")
    np.testing.assert_array_equal(g, [0, 1, 2, 3])


def test_dataset_validation():
    with pytest.raises(DomainError):
        MetaDataset([1.0], [0.0], ["a"], ["r"], np.zeros((1, 0)))
    with pytest.raises(DomainError):
        MetaDataset([np.nan], [1.0], ["a"], ["r"], np.zeros((1, 0)))
