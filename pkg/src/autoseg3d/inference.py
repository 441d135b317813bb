"""Whole-volume prediction by stitching overlapping patch predictions.

Windows are placed at stride ``patch * (1 - overlap)`` per axis with the
final window clamped to the volume edge.  Per-window logits are
accumulated under constant or gaussian blending weights and normalized
by the summed weight, so every output voxel is a convex combination of
window outputs.  Volumes smaller than the patch are edge-padded,
inferred once, and cropped.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .decoder import predict_labels
from .errors import ConfigError
from .metrics import AggregateReport, MetricsReport, aggregate_reports, score_case
from .volumes import LabelMap, Volume

logger = logging.getLogger(__name__)


@dataclass
class SlidingWindowConfig:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    overlap_ratio: float = 0.75
    blending: str = "constant"              # constant | gaussian
    gaussian_sigma_fraction: float = 0.125

    def __post_init__(self):
        self.patch_size = tuple(self.patch_size)
        if not 0.0 <= self.overlap_ratio < 1.0:
            raise ConfigError(f"overlap_ratio must be in [0, 1), got {self.overlap_ratio}")
        if self.blending not in ("constant", "gaussian"):
            raise ConfigError(f"unknown blending {self.blending!r}")


def window_starts(axis_size: int, patch: int, overlap: float) -> list[int]:
    """Start offsets along one axis; the last window is clamped flush to
    the edge."""
    if axis_size <= patch:
        return [0]
    stride = max(1, int(round(patch * (1.0 - overlap))))
    starts = list(range(0, axis_size - patch + 1, stride))
    if starts[-1] != axis_size - patch:
        starts.append(axis_size - patch)
    return starts


def blend_weights(cfg: SlidingWindowConfig) -> np.ndarray:
    """Per-voxel weight of one window before normalization."""
    if cfg.blending == "constant":
        return np.ones(cfg.patch_size, dtype=np.float64)
    axes = []
    for n in cfg.patch_size:
        sigma = max(cfg.gaussian_sigma_fraction * n, 1e-3)
        x = np.arange(n, dtype=np.float64) - (n - 1) / 2.0
        axes.append(np.exp(-0.5 * (x / sigma) ** 2))
    w = axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]
    return np.maximum(w, w.max() * 1e-4)


def sliding_window_infer(
    volume: Volume,
    model,
    cfg: SlidingWindowConfig,
    num_out_channels: int | None = None,
) -> np.ndarray:
    """Run ``model`` over every window and stitch logits.

    ``model`` maps a (1, 1, pd, ph, pw) float tensor to (1, C, pd, ph, pw)
    logits.  Returns stitched logits (C, D, H, W) as float64.
    """
    data = volume.data.astype(np.float32)
    orig_shape = data.shape
    pads = [(0, max(0, p - s)) for p, s in zip(cfg.patch_size, orig_shape)]
    if any(hi for _, hi in pads):
        data = np.pad(data, pads, mode="edge")
    shape = data.shape

    starts = [window_starts(s, p, cfg.overlap_ratio) for s, p in zip(shape, cfg.patch_size)]
    weights = blend_weights(cfg)

    accum = None
    weight_sum = np.zeros(shape, dtype=np.float64)
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    with torch.no_grad():
        for sd in starts[0]:
            for sh in starts[1]:
                for sw in starts[2]:
                    sl = (
                        slice(sd, sd + cfg.patch_size[0]),
                        slice(sh, sh + cfg.patch_size[1]),
                        slice(sw, sw + cfg.patch_size[2]),
                    )
                    patch = torch.from_numpy(np.ascontiguousarray(data[sl]))[None, None]
                    logits = model(patch)
                    out = logits[0].detach().cpu().numpy().astype(np.float64)
                    if accum is None:
                        channels = out.shape[0]
                        if num_out_channels is not None and channels != num_out_channels:
                            raise ConfigError(
                                f"model produced {channels} channels, expected {num_out_channels}"
                            )
                        accum = np.zeros((channels,) + shape, dtype=np.float64)
                    accum[(slice(None),) + sl] += out * weights
                    weight_sum[sl] += weights
    if was_training and hasattr(model, "train"):
        model.train()
    stitched = accum / weight_sum
    crop = tuple(slice(0, s) for s in orig_shape)
    return stitched[(slice(None),) + crop]


def evaluate(
    cases: list[tuple[str, Volume, Optional[LabelMap]]],
    model,
    tolerance_mm,
    cfg: SlidingWindowConfig,
    num_classes: int,
) -> tuple[list[MetricsReport], AggregateReport]:
    """Sliding-window inference + per-class metrics for every case; cases
    without ground truth are skipped with a warning record."""
    reports: list[MetricsReport] = []
    skipped: list[str] = []
    for case_id, vol, gt in cases:
        if gt is None:
            logger.warning("case %s has no ground truth; skipping", case_id)
            skipped.append(case_id)
            continue
        logits = sliding_window_infer(vol, model, cfg, num_out_channels=num_classes + 1)
        pred = predict_labels(logits, num_classes, vol.spacing_mm)
        reports.append(score_case(case_id, pred, gt, num_classes, tolerance_mm))
    return reports, aggregate_reports(reports, skipped)


def normalized_weight_map(shape: tuple[int, int, int], cfg: SlidingWindowConfig) -> np.ndarray:
    """Sum of normalized blending weights at every voxel (1.0 everywhere by
    construction; exposed so the property can be asserted directly)."""
    starts = [window_starts(s, p, cfg.overlap_ratio) for s, p in zip(shape, cfg.patch_size)]
    weights = blend_weights(cfg)
    weight_sum = np.zeros(shape, dtype=np.float64)
    for sd in starts[0]:
        for sh in starts[1]:
            for sw in starts[2]:
                sl = (
                    slice(sd, sd + cfg.patch_size[0]),
                    slice(sh, sh + cfg.patch_size[1]),
                    slice(sw, sw + cfg.patch_size[2]),
                )
                weight_sum[sl] += weights
    total = np.zeros(shape, dtype=np.float64)
    for sd in starts[0]:
        for sh in starts[1]:
            for sw in starts[2]:
                sl = (
                    slice(sd, sd + cfg.patch_size[0]),
                    slice(sh, sh + cfg.patch_size[1]),
                    slice(sw, sw + cfg.patch_size[2]),
                )
                total[sl] += weights / weight_sum[sl]
    return total
