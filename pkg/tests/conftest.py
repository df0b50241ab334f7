import numpy as np
import pytest

from fosrtest.core import FunctionalDataset, Grid
from fosrtest.regression import orthogonalize


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def random_problem(rng, n=30, N=12, p=2, q=2, observe=0.7, intercept=True):
    """Random design and partially observed curves; every column keeps at least p+q+1 subjects."""
    X = rng.normal(size=(n, p))
    Z = rng.normal(size=(n, q))
    if intercept and q:
        Z[:, 0] = 1.0
    dp = orthogonalize(X, Z)
    Y = rng.normal(size=(n, N))
    mask = (rng.random((n, N)) < observe).astype(np.int8)
    for m in range(N):
        short = p + q + 1 - mask[:, m].sum()
        if short > 0:
            mask[rng.choice(np.flatnonzero(mask[:, m] == 0), short, replace=False), m] = 1
    grid = Grid.uniform(N)
    return FunctionalDataset.partial(grid, Y, mask), dp
