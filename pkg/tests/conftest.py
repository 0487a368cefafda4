import numpy as np
import pytest

from vcbm.lcbm import VCBM, ModelConfig
from vcbm.synthdata import assign_splits, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_samples():
    # 24x24 frames keep the whole pipeline fast; T=16 so s=1 is the identity
    return assign_splits(generate(40, 5, shape=(16, 24, 24, 3)), seed=5)


@pytest.fixture
def small_model():
    cfg = ModelConfig(frames=16, height=24, width=24, tubelet=(4, 8, 8), dim=4, k=3)
    return VCBM.init(cfg, seed=0)
