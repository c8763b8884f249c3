import os

import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

import toys

torch.set_num_threads(1)
torch.use_deterministic_algorithms(True)

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_fill(tmp_path_factory):
    return toys.run_fill(tmp_path_factory.mktemp("toy_fill"))


@pytest.fixture(scope="session")
def toy_sep(tmp_path_factory):
    return toys.run_sep(tmp_path_factory.mktemp("toy_sep"))


@pytest.fixture(scope="session")
def toy_res(tmp_path_factory):
    return toys.run_res(tmp_path_factory.mktemp("toy_res"))
