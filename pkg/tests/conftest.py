import itertools

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def vertex_enumeration_ot(C, mu, nu):
    """Brute-force exact OT: best basic feasible solution of the transport polytope."""
    C = np.asarray(C, dtype=float)
    n, m = C.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        A[n + j, j::m] = 1
    b = np.r_[mu, nu]
    best = np.inf
    for S in itertools.combinations(range(n * m), n + m - 1):
        x, *_ = np.linalg.lstsq(A[:, S], b, rcond=None)
        if np.abs(A[:, S] @ x - b).max() < 1e-10 and x.min() > -1e-12:
            best = min(best, float(C.ravel()[list(S)] @ x))
    return best


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
