import numpy as np
import pytest

from fogsim.models import Dataset


def connected_gnp_adjacency(rng: np.random.Generator, n: int, p: float = 0.5) -> np.ndarray:
    """G(n, p) conditioned on connectivity (redrawn until connected)."""
    from fogsim.topology import _connected

    while True:
        upper = np.triu(rng.random((n, n)) < p, 1)
        adj = upper | upper.T
        if _connected(adj):
            return adj


def make_dataset(features, labels, owner=None) -> Dataset:
    return Dataset(
        np.asarray(features, dtype=np.float64),
        np.asarray(labels, dtype=np.int64),
        owner=owner,
    )


def random_dataset(rng: np.random.Generator, n: int, d: int, c: int) -> Dataset:
    return make_dataset(rng.normal(size=(n, d)), rng.integers(0, c, size=n))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
