import numpy as np
import pytest

from dynmask import AttnConfig, init_weights


@pytest.fixture
def small_cfg():
    return AttnConfig(n_heads=2, head_dim=8, keep_per_row=4, block_q=4, block_k=4)


@pytest.fixture
def small_weights(small_cfg):
    return init_weights(small_cfg, seed=0)


def random_hidden(t, d_model, seed=0, dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((t, d_model)).astype(dtype)
