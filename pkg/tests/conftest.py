import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile(
    "suite", max_examples=25, deadline=None,
    suppress_health_check=[HealthCheck.too_slow, HealthCheck.data_too_large],
)
settings.load_profile("suite")

from vctkit.phantom import PhantomSpec, generate_phantom


@pytest.fixture(scope="session")
def phantom_default():
    """One mid-sized phantom shared by measurement-level tests."""
    spec = PhantomSpec(sex="M", age_years=52.0, height_cm=176.0, weight_kg=81.0,
                       fat_fraction=0.24, muscle_fraction=0.38,
                       spacing_mm=(3.0, 3.0, 3.0), seed=99)
    vol, tissue, structure, truth = generate_phantom(spec)
    return spec, vol, tissue, structure, truth


@pytest.fixture(scope="session")
def phantom_small():
    """A second, lighter phantom for pairwise metrics."""
    spec = PhantomSpec(sex="F", age_years=34.0, height_cm=161.0, weight_kg=58.0,
                       fat_fraction=0.30, muscle_fraction=0.33,
                       spacing_mm=(3.0, 3.0, 3.0), seed=100)
    vol, tissue, structure, truth = generate_phantom(spec)
    return spec, vol, tissue, structure, truth


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
