import numpy as np
import pytest
import torch

from denoiser import GlyphUNet, ModelConfig
from diffusion_core import make_linear_schedule
from glyph_data import build_universe


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


@pytest.fixture
def schedule4():
    """T=4, betas 0.1..0.4: alpha_bar = [0.9, 0.72, 0.504, 0.3024]."""
    return make_linear_schedule(4, 0.1, 0.4)


@pytest.fixture
def toy_config():
    return ModelConfig(
        image_size=8,
        num_stages=2,
        base_channels=8,
        channel_multipliers=(1, 2),
        blocks_per_stage=1,
        attention_resolutions=(4,),
        num_heads=2,
        writer_count=2,
        writer_embed_dim=16,
        timestep_embed_dim=16,
    )


@pytest.fixture
def toy_model(toy_config):
    torch.manual_seed(1)
    return GlyphUNet(toy_config)


@pytest.fixture
def small_manifest():
    return build_universe(4, 12, 0.75, seed=3, num_writers=2, samples_per_pair=4,
                          test_fraction=0.25, image_size=16)
