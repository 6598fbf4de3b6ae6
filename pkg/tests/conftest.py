import numpy as np
import pytest

from nbodykam.space import MassSystem


@pytest.fixture(scope="session")
def kepler2():
    """Equal-mass two-body problem in the plane, Newtonian exponent."""
    return MassSystem(masses=[1.0, 1.0], dim=2, kappa=0.5)


@pytest.fixture(scope="session")
def kepler1d():
    return MassSystem(masses=[1.0, 1.0], dim=1, kappa=0.5)


@pytest.fixture(scope="session")
def three2d():
    return MassSystem(masses=[1.0, 1.0, 1.0], dim=2, kappa=0.5)


@pytest.fixture(scope="session")
def three1d():
    return MassSystem(masses=[1.0, 1.0, 1.0], dim=1, kappa=0.5)


@pytest.fixture()
def rng():
    return np.random.default_rng(20260814)
