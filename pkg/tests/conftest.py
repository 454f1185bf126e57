import numpy as np
import pytest
import torch

from neuroseg3d.swin3d import EncoderConfig


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


def micro_encoder_config(in_channels=1, embed_dim=8, heads=(1, 2, 4, 8)):
    """The small-everything config used across unit tests: 4 stages of one
    block each, window 2, suitable for 16^3 inputs."""
    return EncoderConfig(
        in_channels=in_channels,
        embed_dim=embed_dim,
        depths=(1, 1, 1, 1),
        heads=heads,
        window=(2, 2, 2),
        variant_name="tiny",
    )


def random_volume(shape=(1, 16, 16, 16), seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=shape).astype(np.float32)
