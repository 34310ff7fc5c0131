import numpy as np
import pytest

from factornet.tensor import Rng


@pytest.fixture
def rng():
    return Rng(2024, 1)


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for p in range(k):
                s += a[i, p] * b[p, j]
            out[i, j] = s
    return out
