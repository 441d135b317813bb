"""Auto prompt generator: a small fully-convolutional 3D encoder-decoder
that turns the image encoder's final feature map into a prompt embedding,
standing in for manual point/box prompts.

Trained entirely from scratch; no parameter here appears in an imported
2D archive.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoder import LayerNorm3d
from .errors import ConfigError, ShapeError


@dataclass
class APGConfig:
    level_count: int = 3           # resolution levels; level_count-1 downsamplings
    base_channels: int = 4
    max_channels: int = 8          # widths double per level, capped here
    out_channels: int = 8          # prompt embedding channels
    in_channels: int = 8           # encoder final-map channels

    def __post_init__(self):
        if self.level_count < 1:
            raise ConfigError("level_count must be >= 1")
        if min(self.base_channels, self.max_channels, self.out_channels, self.in_channels) < 1:
            raise ConfigError("channel counts must be >= 1")

    def widths(self) -> list[int]:
        return [min(self.base_channels * 2 ** l, self.max_channels)
                for l in range(self.level_count)]

    @property
    def divisor(self) -> int:
        return 2 ** (self.level_count - 1)


class ConvBlock3D(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv3d(in_ch, out_ch, 3, padding=1), LayerNorm3d(out_ch), nn.ReLU(),
            nn.Conv3d(out_ch, out_ch, 3, padding=1), LayerNorm3d(out_ch), nn.ReLU(),
        )

    def forward(self, x):
        return self.net(x)


class AutoPromptGenerator(nn.Module):
    """U-shaped pass over the token grid: strided-conv downsampling,
    nearest-neighbor + conv upsampling, skip concatenations, and a final
    1x1x1 projection to the prompt width."""

    def __init__(self, cfg: APGConfig):
        super().__init__()
        self.cfg = cfg
        widths = cfg.widths()
        self.enc_blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        self.enc_blocks.append(ConvBlock3D(cfg.in_channels, widths[0]))
        for l in range(1, cfg.level_count):
            self.downs.append(nn.Conv3d(widths[l - 1], widths[l], 3, stride=2, padding=1))
            self.enc_blocks.append(ConvBlock3D(widths[l], widths[l]))
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for l in range(cfg.level_count - 2, -1, -1):
            self.ups.append(nn.Conv3d(widths[l + 1], widths[l], 3, padding=1))
            self.dec_blocks.append(ConvBlock3D(2 * widths[l], widths[l]))
        self.out_proj = nn.Conv3d(widths[0], cfg.out_channels, 1)

    def forward(self, final_map: torch.Tensor) -> torch.Tensor:
        # final_map: (B, in_channels, D', H', W') -> (B, out_channels, same grid)
        spatial = final_map.shape[2:]
        div = self.cfg.divisor
        if any(s % div for s in spatial):
            raise ShapeError(
                f"prompt generator needs spatial dims divisible by {div}, got {tuple(spatial)}"
            )
        skips = []
        x = self.enc_blocks[0](final_map)
        for down, block in zip(self.downs, self.enc_blocks[1:]):
            skips.append(x)
            x = block(down(x))
        for up, block in zip(self.ups, self.dec_blocks):
            x = nn.functional.interpolate(x, scale_factor=2, mode="nearest")
            x = up(x)
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.out_proj(x)
