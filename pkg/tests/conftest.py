import numpy as np
import pytest

from driftdr.data_model import Dataset


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_dataset(n=200, seed=0, p=3, miss_frac=0.3):
    """A generic synthetic dataset with MAR-ish missingness for unit tests."""
    r = np.random.default_rng(seed)
    w = r.normal(size=(n, p))
    a = r.integers(0, 2, size=n)
    m = (r.uniform(size=n) > miss_frac).astype(int)
    lin = 0.3 * w[:, 0] - 0.2 * w[:, 1] + 0.5 * a
    y = (r.uniform(size=n) < 1.0 / (1.0 + np.exp(-lin))).astype(float)
    y = np.where(m == 1, y, np.nan)
    # guarantee a nonempty complete-case subset
    a[:8] = 1
    m[:8] = 1
    y[:8] = (np.arange(8) % 2).astype(float)
    return Dataset(w, a, m, y, [f"w{i}" for i in range(p)])


@pytest.fixture
def dataset():
    return make_dataset()


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criterion verdict lines after the test summary."""
    import sys

    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    lines = getattr(mod, "VERDICTS", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
