import numpy as np
import pytest

from pgrl.data import gen_synthetic, split_train_val_test
from pgrl.nn import Model, ModelConfig


@pytest.fixture(scope="session")
def tiny_task():
    """A small easy task: (train, val, test) with k=3, in_dim=16."""
    ds = gen_synthetic(60, 3, 16, seed=11)
    return split_train_val_test(ds, val_per_class=5, test_per_class=10, seed=12)


@pytest.fixture
def small_model():
    return Model(ModelConfig(in_dim=16, k=3, d1=8, d2=6, f_hidden=12, s_hidden=8), seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(99)
