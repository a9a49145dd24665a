import numpy as np
import pytest

from enkbf_lab.model import Model, ModelGenSpec, make_ou_model
from enkbf_lab.paths import simulate_truth_and_observations
from enkbf_lab.rng import derive_stream


@pytest.fixture
def scalar_model():
    """a=-1, c=1, r1=r2=1: the Riccati root is sqrt(2) - 1."""
    return Model.scalar(-1.0, 1.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def model2():
    return make_ou_model(ModelGenSpec(2, 2, seed=0))


@pytest.fixture(scope="session")
def record2(model2):
    return simulate_truth_and_observations(model2, 4, 7, derive_stream(11))


def tiny_model(d_x=1, A=0.0, C=0.0, eps=1e-30, m0=6.0):
    """Drift-free model with negligible noise and initial spread."""
    I = np.eye(d_x)
    return Model(A=A * I, C=C * np.ones((1, d_x)), R1=eps * I, R2=np.eye(1),
                 m0=np.full(d_x, m0), P0=eps * I)
