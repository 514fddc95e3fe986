import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from ivc_prune.toy_model import ModelConfig, init_model, make_sequence  # noqa: E402


@pytest.fixture
def small_cfg():
    return ModelConfig(n_layers=3, n_heads=2, head_dim=8, init_seed=7)


@pytest.fixture
def small_model(small_cfg):
    return init_model(small_cfg)


@pytest.fixture
def small_seq(small_cfg):
    return make_sequence(text_len=4, visual_len=16, hidden_dim=small_cfg.hidden_dim, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
