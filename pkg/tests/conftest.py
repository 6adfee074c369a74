import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_config():
    from dcl.config import Config

    return Config.tiny()


@pytest.fixture(scope="session")
def tiny_data(tiny_config):
    from dcl.synthdata import generate_dataset

    return generate_dataset(tiny_config, 7)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
