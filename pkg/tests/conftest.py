from __future__ import annotations

import numpy as np
import pytest

from adadelay.problems import L2Ball, QuadraticProblem, make_logistic


@pytest.fixture
def quad10():
    """Small well-conditioned quadratic with a noisy oracle."""
    curv = np.linspace(1.0, 0.1, 10)
    x_star = np.linspace(-0.5, 0.5, 10)
    return QuadraticProblem(curv, x_star, sigma=0.5, domain=L2Ball(5.0))


@pytest.fixture(scope="session")
def small_logistic():
    return make_logistic(n=300, dim=40, nnz_per_row=5, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
