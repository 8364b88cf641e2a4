import numpy as np
import pytest

from kvreuse import ModelConfig, init_model

# 4-layer toy model used by most functional tests
SMALL_CFG = ModelConfig(num_layers=4, num_heads=2, model_dim=32, kv_dim=32,
                        vocab_size=97, patch_size=4, tokens_per_image=16, seed=7)

# larger image (64 tokens) for the statistical error experiments
ERRLAB_CFG = ModelConfig(num_layers=4, num_heads=2, model_dim=32, kv_dim=32,
                         vocab_size=97, patch_size=4, tokens_per_image=64, seed=7)


@pytest.fixture(scope="session")
def small_model():
    return init_model(SMALL_CFG)


@pytest.fixture(scope="session")
def errlab_model():
    return init_model(ERRLAB_CFG)


def rel_err(actual: np.ndarray, expected: np.ndarray) -> float:
    """max |a - e| normalized by the magnitude of the expected values."""
    scale = max(1e-6, float(np.max(np.abs(expected))))
    return float(np.max(np.abs(np.asarray(actual) - np.asarray(expected)))) / scale
