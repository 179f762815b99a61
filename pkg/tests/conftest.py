import numpy as np
import pytest

from synfed.datakit import Dataset, LabelRegistry
from synfed.nnkit import ModelArch


@pytest.fixture
def small_arch():
    return ModelArch(4, 5, 3)


def blobs(n_per_class=30, k=3, d=4, sep=4.0, std=0.3, seed=0):
    """Tiny well-separated dataset used across modules."""
    rng = np.random.default_rng(seed)
    means = sep * np.eye(k, d)
    x = np.concatenate([means[c] + std * rng.standard_normal((n_per_class, d)) for c in range(k)])
    y = np.repeat(np.arange(k), n_per_class)
    perm = rng.permutation(len(y))
    return Dataset(x[perm], y[perm], LabelRegistry.numbered(k))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for res in RESULTS:
            terminalreporter.write_line(res.line())
