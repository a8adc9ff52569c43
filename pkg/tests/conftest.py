import numpy as np
import pytest
from hypothesis import settings

from threewave.manifold import Conformal, Constant, GaussianBump, Minkowski, PerturbedMinkowski

settings.register_profile("threewave", deadline=None, max_examples=25, derandomize=True)
settings.load_profile("threewave")


@pytest.fixture(scope="session")
def flat():
    return Minkowski(2)


@pytest.fixture(scope="session")
def lens():
    """Focusing weak-field lens: a slab in x^1, x^2 of refractive index above one."""
    return PerturbedMinkowski(2, 0.15, (0.0, 0.0, 0.0), (100.0, 1.0, 1.0))


@pytest.fixture(scope="session")
def conformal4():
    return Conformal(Minkowski(2), Constant(4.0))


@pytest.fixture(scope="session")
def conformal_bump():
    return Conformal(Minkowski(2), GaussianBump((0.0, 0.5, 0.0), 0.8, 0.5))


def rel_err(a, b):
    return abs(a - b) / max(abs(b), 1e-300)
