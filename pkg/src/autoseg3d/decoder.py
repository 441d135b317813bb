"""Mask decoder with multi-layer aggregation.

Fusion on the token grid: the neck output is projected to the fusion
width and, when the aggregation flag is on, enriched with 1x1x1
projections of the four encoder stage taps; the prompt embedding is
concatenated and fused by a 3x3x3 conv.  The prompt-fusion conv is part
of the decoder proper and exists in every configuration -- disabling the
prompt generator feeds it a zero prompt, so the ablation removes exactly
the generator's own parameters.

Decoding: two nearest-neighbor-upsample + conv stages back to patch
resolution, concatenation with the (normalized) input patch, and one
final 3x3x3 conv producing per-class logits (channel 0 = background).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .encoder import FeaturePyramid, LayerNorm3d
from .errors import ConfigError, NumericError, ShapeError
from .volumes import LabelMap


@dataclass
class DecoderConfig:
    fusion_channels: int = 8
    num_classes: int = 1              # foreground classes K; logits have K+1 channels
    prompt_channels: int = 8          # width of the prompt embedding
    in_channels: int = 8              # neck output width
    stage_channels: int = 32          # encoder stage-tap width (embed dim)
    upsample_factor: int = 8          # patch kernel k
    mlam_enabled: bool = True
    apg_enabled: bool = True

    def __post_init__(self):
        if self.fusion_channels < 1:
            raise ConfigError("fusion_channels must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        if self.upsample_factor < 1:
            raise ConfigError("upsample_factor must be >= 1")

    def upsample_stages(self) -> tuple[int, int] | None:
        """Two integer stage factors when k is a power of two (>1); None
        means a single trilinear resize."""
        k = self.upsample_factor
        if k > 1 and k & (k - 1) == 0:
            log = k.bit_length() - 1
            a = 2 ** ((log + 1) // 2)
            return a, k // a
        return None


class MaskDecoder3D(nn.Module):
    def __init__(self, cfg: DecoderConfig):
        super().__init__()
        self.cfg = cfg
        f = cfg.fusion_channels
        self.final_proj = nn.Conv3d(cfg.in_channels, f, 1)
        if cfg.mlam_enabled:
            self.stage_projs = nn.ModuleList(
                nn.Conv3d(cfg.stage_channels, f, 1) for _ in range(4)
            )
        self.prompt_fuse = nn.Conv3d(f + cfg.prompt_channels, f, 3, padding=1)
        stages = cfg.upsample_stages()
        if stages is not None:
            self.up_factors = stages
            self.up_convs = nn.ModuleList()
            for _ in stages:
                self.up_convs.append(nn.Sequential(
                    nn.Conv3d(f, f, 3, padding=1), LayerNorm3d(f), nn.ReLU(),
                ))
        else:
            self.up_factors = None
            self.up_convs = nn.ModuleList([nn.Sequential(
                nn.Conv3d(f, f, 3, padding=1), LayerNorm3d(f), nn.ReLU(),
            )])
        self.head = nn.Conv3d(f + 1, cfg.num_classes + 1, 3, padding=1)

    def fuse(self, pyramid: FeaturePyramid, prompt: torch.Tensor | None) -> torch.Tensor:
        """Aggregate pyramid (+ prompt) into one fusion-width map."""
        final_map = pyramid.final_map
        fused = self.final_proj(final_map)
        if self.cfg.mlam_enabled:
            if len(pyramid.stage_maps) != 4:
                raise ShapeError(f"expected 4 stage maps, got {len(pyramid.stage_maps)}")
            for proj, stage in zip(self.stage_projs, pyramid.stage_maps):
                if stage.shape[2:] != final_map.shape[2:]:
                    raise ShapeError(
                        f"stage map grid {tuple(stage.shape[2:])} does not match "
                        f"final map grid {tuple(final_map.shape[2:])}"
                    )
                fused = fused + proj(stage)
        if prompt is None:
            prompt = fused.new_zeros(
                fused.shape[0], self.cfg.prompt_channels, *fused.shape[2:]
            )
        elif prompt.shape[2:] != fused.shape[2:]:
            raise ShapeError(
                f"prompt grid {tuple(prompt.shape[2:])} does not match "
                f"fused grid {tuple(fused.shape[2:])}"
            )
        return self.prompt_fuse(torch.cat([fused, prompt], dim=1))

    def decode(self, fused: torch.Tensor, image_patch: torch.Tensor) -> torch.Tensor:
        """Upsample to patch resolution, concatenate the image, emit logits."""
        if self.up_factors is not None:
            x = fused
            for factor, conv in zip(self.up_factors, self.up_convs):
                x = nn.functional.interpolate(x, scale_factor=factor, mode="nearest")
                x = conv(x)
        else:
            x = nn.functional.interpolate(
                fused, size=image_patch.shape[2:], mode="trilinear", align_corners=False
            )
            x = self.up_convs[0](x)
        if x.shape[2:] != image_patch.shape[2:]:
            raise ShapeError(
                f"upsampled grid {tuple(x.shape[2:])} does not match patch "
                f"{tuple(image_patch.shape[2:])}; check upsample_factor"
            )
        return self.head(torch.cat([x, image_patch], dim=1))

    def forward(self, pyramid: FeaturePyramid, prompt, image_patch) -> torch.Tensor:
        return self.decode(self.fuse(pyramid, prompt), image_patch)


def predict_labels(logits: np.ndarray, num_classes: int, spacing_mm) -> LabelMap:
    """Per-voxel argmax over K+1 channels; ties go to the lowest index."""
    logits = np.asarray(logits)
    if logits.ndim != 4:
        raise ShapeError(f"logits must be (K+1, D, H, W), got shape {logits.shape}")
    if not np.isfinite(logits).all():
        raise NumericError("logits contain NaN or Inf")
    labels = np.argmax(logits, axis=0).astype(np.int16)
    return LabelMap(labels, num_classes, spacing_mm)
