import numpy as np
import pytest

from uwbguard.dataset import GeneratorConfig, generate, split
from uwbguard.model import TrainConfig, init_params, train


@pytest.fixture(scope="session")
def tiny_data():
    return split(generate(GeneratorConfig(n_samples=48, seed=5)), 5)


@pytest.fixture(scope="session")
def trained(tiny_data):
    """A briefly trained model; enough to have real running statistics."""
    cfg = TrainConfig(epochs=15, learning_rate=1e-3, optimizer="adam", bn_gamma_init=0.01, train_bn_affine=False, seed=5)
    return train(tiny_data, cfg)


@pytest.fixture
def random_params():
    """Untrained weights with non-trivial batch-norm state, for gradient checks."""
    rng = np.random.default_rng(8)
    p = init_params(seed=8)
    for bn in p.bn_states:
        bn.gamma[:] = rng.uniform(0.5, 1.5, 6)
        bn.beta[:] = rng.normal(0, 0.1, 6)
        bn.running_mean[:] = rng.uniform(0.0, 0.2, 6)
        bn.running_var[:] = rng.uniform(0.01, 0.1, 6)
    return p
