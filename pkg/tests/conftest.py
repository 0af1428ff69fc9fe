import numpy as np
import pytest
import torch

from eag.lorenz import make_lorenz_dataset


@pytest.fixture(scope="session")
def tiny_lorenz():
    return make_lorenz_dataset(n_trials=40, n_neurons=8, T=32, seed=3)


@pytest.fixture(autouse=True)
def _single_thread():
    # reductions must not depend on the thread pool size
    torch.set_num_threads(1)
    yield


def poisson_counts(rate, shape, seed=0):
    return np.random.default_rng(seed).poisson(rate, shape)
