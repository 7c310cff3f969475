import numpy as np
import pytest

from jigsaw.comm import InProcWorld
from jigsaw.tensor import MatmulMode


def naive_matmul(a, b, mode=MatmulMode.NN):
    """Triple-loop oracle, independent of the library kernels."""
    mode = MatmulMode(mode)
    if mode == MatmulMode.NT:
        b = np.asarray(b).T
    if mode == MatmulMode.TN:
        a = np.asarray(a).T
    a, b = np.asarray(a), np.asarray(b)
    m, k = a.shape
    k2, n = b.shape
    assert k == k2
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = a.dtype.type(0)
            for l in range(k):
                acc += a[i, l] * b[l, j]
            out[i, j] = acc
    return out


def rel_err(actual, expected):
    expected = np.asarray(expected)
    scale = max(np.max(np.abs(expected)), 1e-30)
    return np.max(np.abs(np.asarray(actual) - expected)) / scale


def central_diff(f, x, step=1e-5):
    """Central finite difference of a scalar function at scalar x."""
    return (f(x + step) - f(x - step)) / (2 * step)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def world2():
    return InProcWorld(2)
