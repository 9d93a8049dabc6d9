import numpy as np
import pytest

from follmer import GaussianMixtureTarget, get_schedule, make_quadrature_target


@pytest.fixture(scope="session")
def linlin():
    return get_schedule("linear-linear")


@pytest.fixture(scope="session")
def linsqrt():
    return get_schedule("linear-sqrt")


@pytest.fixture(scope="session")
def std_normal_target():
    return GaussianMixtureTarget([1.0], [[0.0]], [[[1.0]]])


@pytest.fixture(scope="session")
def three_component_target():
    """Asymmetric 1-d mixture used by the formula-equivalence checks."""
    return GaussianMixtureTarget(
        weights=[0.5, 0.3, 0.2],
        means=[[-1.5], [0.5], [2.0]],
        covariances=[[[0.25]], [[0.49]], [[0.09]]],
        smoothing_eta=0.1,
    )


@pytest.fixture(scope="session")
def bimodal_2d_target():
    return GaussianMixtureTarget(
        weights=[0.4, 0.6],
        means=[[-1.0, 0.5], [1.2, -0.3]],
        covariances=[np.diag([0.3, 0.2]), [[0.25, 0.1], [0.1, 0.4]]],
        smoothing_eta=0.2,
    )


@pytest.fixture(scope="session")
def laplace_target():
    return make_quadrature_target("laplace", scale=1.0)
