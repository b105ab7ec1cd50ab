import numpy as np
import pytest

from glyphflow.atlas import default_atlas, vocab_for
from glyphflow.backbone import Model, ModelConfig


TINY_CFG = ModelConfig(d_model=32, n_heads=2, n_blocks=2, patch_size=4,
                       canvas_size=16, vocab_size=12, l_max=4, mlp_ratio=2,
                       dtype="float64")

SMALL_CFG = ModelConfig(d_model=64, n_heads=2, n_blocks=2, patch_size=4,
                        canvas_size=32, vocab_size=38, l_max=8, mlp_ratio=2,
                        dtype="float32")


def randomize_params(model: Model, rng, scale=0.05):
    """All tensors random and nonzero, including the zero-initialized
    modulation and output heads, so every path is live."""
    for name in model.params:
        model.params[name] = rng.standard_normal(
            model.params[name].shape).astype(model.cfg.np_dtype) * scale
    return model


@pytest.fixture(scope="session")
def atlas():
    return default_atlas()


@pytest.fixture(scope="session")
def vocab(atlas):
    return vocab_for(atlas)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)
