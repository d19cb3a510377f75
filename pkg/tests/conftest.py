import numpy as np
import pytest

from datosc.codec import build_task_model, calibrate_prior_vars
from datosc.sources import SourceSpec


@pytest.fixture(scope="session")
def mixture_spec():
    return SourceSpec(kind="class_mixture", n=64, class_count=4, seed=2024)


@pytest.fixture(scope="session")
def mixture_priors(mixture_spec):
    return calibrate_prior_vars(mixture_spec)


@pytest.fixture(scope="session")
def task4():
    return build_task_model(64, 4)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(0xBEEF)
