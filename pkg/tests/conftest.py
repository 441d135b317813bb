import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from autoseg3d.encoder import EncoderConfig
from autoseg3d.phantoms import generate_surrogate_2d_checkpoint


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def desk_cfg() -> EncoderConfig:
    return EncoderConfig()


@pytest.fixture
def tiny_cfg() -> EncoderConfig:
    # smallest config the stage-tap invariant allows (4 taps -> 4 blocks)
    return EncoderConfig(
        embed_dim=8, num_blocks=4, num_heads=2, patch_kernel=2, window_size=2,
        token_grid=(2, 2, 2), neck_channels=4, mlp_ratio=2.0,
    )


@pytest.fixture
def desk_archive(desk_cfg):
    return generate_surrogate_2d_checkpoint(desk_cfg, seed=11)


@pytest.fixture
def tiny_archive(tiny_cfg):
    return generate_surrogate_2d_checkpoint(tiny_cfg, seed=13)
