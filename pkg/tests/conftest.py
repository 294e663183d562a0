import sys

import numpy as np
import pytest

from bnpmeta.core_data import MetaDataset


def make_dataset(y, var, study=None, X=None, names=None):
    n = len(y)
    study = study if study is not None else [f"s{i}" for i in range(n)]
    X = np.zeros((n, 0)) if X is None else np.asarray(X, dtype=float).reshape(n, -1)
    names = names if names is not None else [f"x{k + 1}" for k in range(X.shape[1])]
    return MetaDataset(y, var, study, [f"r{i}" for i in range(n)], X, names)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
