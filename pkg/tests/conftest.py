import numpy as np
import pytest

from factorgof import ModelSpec, ParamSet


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


@pytest.fixture
def one_factor_spec():
    return ModelSpec(m=6, d=1, loading_pattern=np.ones((6, 1), dtype=int))


@pytest.fixture
def one_factor_params():
    lam = np.array([0.5, 0.6, 0.7, 0.5, 0.6, 0.7])[:, None]
    return ParamSet(
        nu=np.array([0.2, -0.1, 0.0, 0.4, -0.3, 0.1]),
        lam=lam,
        phi=np.eye(1),
        theta=1.0 - lam.ravel() ** 2 + 0.1,
    )


@pytest.fixture
def two_factor_spec():
    pattern = np.zeros((8, 2), dtype=int)
    pattern[:4, 0] = 1
    pattern[4:, 1] = 1
    return ModelSpec(m=8, d=2, loading_pattern=pattern)


@pytest.fixture
def two_factor_params(two_factor_spec):
    lam = np.zeros((8, 2))
    lam[:4, 0] = [0.6, 0.7, 0.5, 0.8]
    lam[4:, 1] = [0.7, 0.6, 0.8, 0.5]
    phi = np.array([[1.0, 0.2], [0.2, 1.0]])
    return ParamSet(
        nu=np.linspace(-0.5, 0.5, 8),
        lam=lam,
        phi=phi,
        theta=1.0 - np.einsum("jk,kl,jl->j", lam, phi, lam) + 0.05,
    )


def random_admissible_free_vector(mapping, rng, scale=0.4):
    """Random free-parameter vector; admissibility holds by construction."""
    return rng.normal(0.0, scale, mapping.q)
