"""测试公共工具: 随机变分分布、有限差分"""
import numpy as np
import pytest

from likelihoods import LikelihoodSpec
from math_core import Kernel, KernelFamily, cholesky_with_jitter, kernel_matrix
from variational_state import GaussianVariational, InducingSet


def random_q(rng, M, scale=0.5):
    """对角为正的随机 q(u)"""
    L = np.tril(rng.normal(0.0, 0.2, (M, M)), -1) + np.diag(rng.uniform(0.3, 0.8, M))
    return GaussianVariational(rng.normal(0.0, scale, M), L)


def random_spd(rng, n, ridge=0.5):
    B = rng.normal(size=(n, n))
    return B @ B.T + ridge * np.eye(n)


def prior_q(kernel, Z):
    """q(u) = N(0, Kuu)"""
    return GaussianVariational(np.zeros(Z.M), cholesky_with_jitter(kernel_matrix(kernel, Z.Z)).L)


def finite_difference(f, x, h=1e-5):
    """中心差分梯度"""
    x = np.asarray(x, dtype=float)
    g = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


LIKELIHOOD_CYCLE = (
    LikelihoodSpec.gaussian(0.7),
    LikelihoodSpec.bernoulli(),
    LikelihoodSpec.poisson(),
)


def sample_outputs(rng, spec, n):
    if spec.is_classification:
        return rng.integers(0, 2, n).astype(float)
    if spec.noise_std is None:
        return rng.poisson(1.5, n).astype(float)
    return rng.normal(0.0, 1.0, n)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def rbf():
    return Kernel(KernelFamily.RBF, 0.3, 1.0)


@pytest.fixture
def grid_z():
    return InducingSet(np.linspace(0.0, 1.0, 5)[:, None])
