import numpy as np
import pytest

from demfit import LmmModel, Sample, SimDesign, Theta, simulate


def random_sample(rng, p, q, n_i=None):
    n_i = n_i or int(rng.integers(1, 7))
    X = rng.standard_normal((n_i, p))
    Z = rng.standard_normal((n_i, q))
    y = rng.standard_normal(n_i) * 2.0
    return Sample(y=y, X=X, Z=Z)


def random_theta(rng, p, q):
    beta = rng.standard_normal(p)
    A = rng.standard_normal((q, q))
    D = A @ A.T + q * np.eye(q)
    tau2 = float(rng.uniform(0.5, 3.0))
    return Theta.from_cov(beta, D, tau2)


@pytest.fixture(scope="session")
def small_dataset():
    samples, truth = simulate(SimDesign(m=60, n=1200, p=4, q=3, seed=11))
    return samples, truth


@pytest.fixture()
def small_model():
    return LmmModel(4, 3)
