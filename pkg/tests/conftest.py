import os

import numpy as np
import pytest

from src.services.config import ModelConfig, RabConfig
from src.services.numerics import precision


def pytest_collection_modifyitems(config, items):
    if os.getenv("SHATTER_RUN_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set SHATTER_RUN_SLOW=1 to run desk-scale training checks")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def f64():
    """64-bit storage for oracle and gradient checks."""
    with precision(np.float64):
        yield


@pytest.fixture
def tiny_config():
    """Factory for a 2-layer, d=16, n=4 encoder of any variant."""

    def build(variant="shatter", **overrides):
        data = dict(variant=variant, num_layers=2, hidden_size=16, num_heads=4, intermediate_size=32,
                    vocab_size=30, max_len=8, rpe_clip=4, rab=RabConfig(num_buckets=4, max_distance=4),
                    num_labels=3, init_range=0.2)
        data.update(overrides)
        return ModelConfig(**data)

    return build
