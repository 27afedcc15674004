import numpy as np
import pytest

from fjmpls.funcdata import FjmDataset, FunctionalGrid, FunctionOnGrid, ImageMatrix, SubjectData


def simulate_reduced(n, seed, *, r=1, alpha=1.0, gamma=0.5, beta=(1.0, 0.5, 2.0), b0_scale=4.0,
                     b1_scale=0.0, sigma_u=0.8, sigma_eps=0.4, censor_max=3.0, events=True,
                     dims=(4, 4), n_visits=3):
    """Joint-model data whose image effects enter through one pixel each.

    The longitudinal image score is ``b0_scale * x_i[0] / d`` and the survival
    image score ``b1_scale * x_i[1] / d``; both coefficient images are returned.
    """
    rng = np.random.default_rng(seed)
    grid = FunctionalGrid(dims)
    d = grid.d
    X = rng.normal(size=(n, d))
    b0 = np.zeros(d)
    b0[0] = b0_scale
    b1 = np.zeros(d)
    b1[1] = b1_scale
    subjects = []
    for i in range(n):
        s0 = X[i] @ b0 / d
        s1 = X[i] @ b1 / d
        z = rng.normal()
        u = rng.normal(0.0, sigma_u, size=r)
        if events:
            rate = alpha * beta[1]
            A = np.exp(gamma * z + s1 + alpha * (beta[0] + beta[2] * z + s0 + u[0]))
            U = rng.uniform()
            T = np.log1p(-rate * np.log(U) / A) / rate if rate > 0 else -np.log(U) / A
            C = rng.uniform(0.0, censor_max)
            obs, event = min(T, C), T <= C
        else:
            obs, event = rng.uniform(1.0, censor_max), False
        t = np.sort(rng.uniform(0.0, obs, n_visits))
        q = np.ones((n_visits, 1)) if r == 1 else np.column_stack([np.ones(n_visits), t])
        y = beta[0] + beta[1] * t + beta[2] * z + s0 + q @ u + rng.normal(0.0, sigma_eps, n_visits)
        subjects.append(SubjectData(f"id{i}", t, y, np.array([z]), np.array([z]), q, float(obs),
                                    bool(event)))
    data = FjmDataset(ImageMatrix(grid, X), tuple(subjects))
    return data, FunctionOnGrid(grid, b0), FunctionOnGrid(grid, b1)


@pytest.fixture
def small_joint():
    return simulate_reduced(80, 3)


@pytest.fixture
def tiny_grid():
    return FunctionalGrid((2, 3))
