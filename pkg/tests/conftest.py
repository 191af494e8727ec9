import numpy as np
import pytest
from hypothesis import settings

from committee_kd.data import generate_synthetic
from committee_kd.models import build, menu_spec

settings.register_profile("suite", deadline=None, max_examples=50)
settings.load_profile("suite")


@pytest.fixture(scope="session")
def small_data():
    """100-user/60-item latent-factor corpus shared by training-level tests."""
    return generate_synthetic(n_users=100, n_items=60, latent_dim=4, noise_sd=0.3,
                              n_ratings=5000, seed=17)


@pytest.fixture()
def tiny_data():
    return generate_synthetic(n_users=12, n_items=8, latent_dim=3, noise_sd=0.2,
                              n_ratings=400, seed=5)


@pytest.fixture()
def tiny_student(tiny_data):
    spec = menu_spec("mlp-s", role="student", seed=3)
    return build(spec, tiny_data.schema)
