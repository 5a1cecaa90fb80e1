import numpy as np
import pytest

from diarkit.backend import BackendConfig
from diarkit.encoder import EncoderConfig
from diarkit.model import EendModel, ModelConfig, build_multichannel_from_single


def tiny_model_config(variant="single", **overrides):
    """Small dims so forward passes and gradient checks stay fast."""
    defaults = dict(
        variant=variant,
        encoder=EncoderConfig(
            num_layers=3, model_dim=8, heads=2, ffn_dim=16, feature_dim=4,
            num_multichannel_layers=2, max_positions=64,
        ),
        backend=BackendConfig(num_blocks=1, model_dim=8, conv_kernel=3, heads=2, ffn_dim=16),
        max_speakers=3, max_concurrent=2, comm_hidden=4, comm_heads=2,
    )
    defaults.update(overrides)
    return ModelConfig(**defaults)


@pytest.fixture(scope="session")
def tiny_single():
    return EendModel(tiny_model_config("single"), seed=11)


@pytest.fixture(scope="session")
def tiny_chatt(tiny_single):
    model = build_multichannel_from_single(tiny_single, "chatt", seed=12)
    # move off the identity point so attention carries signal
    rng = np.random.default_rng(13)
    for block in model.comm_blocks:
        block.norm.gamma.data[:] = rng.normal(0.0, 0.2, block.norm.gamma.data.shape)
    return model


@pytest.fixture(scope="session")
def tiny_tac(tiny_single):
    model = build_multichannel_from_single(tiny_single, "tac", seed=14)
    rng = np.random.default_rng(15)
    for block in model.comm_blocks:
        block.norm.gamma.data[:] = rng.normal(0.0, 0.2, block.norm.gamma.data.shape)
    return model
