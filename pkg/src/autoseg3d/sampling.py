"""Foreground/background patch sampling and on-the-fly augmentation.

A patch is *foreground* when its center voxel has label > 0.  Sampling
works in an edge-replicated padded copy of the volume (pad = half patch
per side), so any voxel of the original volume can serve as a patch
center; patches that stay inside the original bounds are identical to
plain crops.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, SamplingError, ShapeError
from .volumes import LabelMap, Volume


@dataclass
class PatchSpec:
    patch_size: tuple[int, int, int] = (32, 32, 32)
    pos_neg_ratio: tuple[int, int] = (1, 1)
    count: int = 4

    def __post_init__(self):
        self.patch_size = tuple(self.patch_size)
        self.pos_neg_ratio = tuple(self.pos_neg_ratio)
        if any(p < 1 for p in self.patch_size):
            raise ConfigError(f"bad patch size {self.patch_size}")
        pos, neg = self.pos_neg_ratio
        if pos < 0 or neg < 0 or pos + neg == 0:
            raise ConfigError(f"bad pos:neg ratio {self.pos_neg_ratio}")
        if self.count < 0:
            raise ConfigError("count must be nonnegative")

    @property
    def foreground_fraction(self) -> float:
        pos, neg = self.pos_neg_ratio
        return pos / (pos + neg)


class PatchSample(NamedTuple):
    image: np.ndarray
    labels: np.ndarray
    is_foreground: bool


def _pad_for_patches(data: np.ndarray, patch_size) -> np.ndarray:
    pads = [(p // 2, p - p // 2) for p in patch_size]
    return np.pad(data, pads, mode="edge")


def sample_patches(
    volume: Volume, labels: LabelMap, spec: PatchSpec, seed: int
) -> list[PatchSample]:
    """Draw spec.count patches; round(count * pos fraction) of them have a
    foreground center voxel.  Deterministic given the seed."""
    if volume.shape != labels.shape:
        raise ShapeError(f"volume {volume.shape} and labels {labels.shape} disagree")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    n_fg = int(round(spec.count * spec.foreground_fraction))
    n_bg = spec.count - n_fg

    fg_flat = np.flatnonzero(labels.data > 0)
    bg_flat = np.flatnonzero(labels.data == 0)
    if n_fg > 0 and fg_flat.size == 0:
        raise SamplingError("no foreground voxels but foreground patches requested")
    if n_bg > 0 and bg_flat.size == 0:
        raise SamplingError("no background voxels but background patches requested")

    padded_img = _pad_for_patches(volume.data, spec.patch_size)
    padded_lab = _pad_for_patches(labels.data, spec.patch_size)

    def cut(flat_index: int, fg: bool) -> PatchSample:
        center = np.unravel_index(flat_index, volume.shape)
        sl = tuple(slice(c, c + p) for c, p in zip(center, spec.patch_size))
        return PatchSample(padded_img[sl].copy(), padded_lab[sl].copy(), fg)

    out = []
    for flat in rng.choice(fg_flat, size=n_fg, replace=True) if n_fg else []:
        out.append(cut(int(flat), True))
    for flat in rng.choice(bg_flat, size=n_bg, replace=True) if n_bg else []:
        out.append(cut(int(flat), False))
    return out


@dataclass
class AugmentConfig:
    flip_prob: float = 0.5          # per axis
    rotate_prob: float = 0.5        # axial-plane 90-degree multiple
    intensity_scale_prob: float = 0.5
    intensity_shift_prob: float = 0.5
    scale_range: tuple[float, float] = (0.9, 1.1)
    shift_range: tuple[float, float] = (-0.1, 0.1)

    def __post_init__(self):
        self.scale_range = tuple(self.scale_range)
        self.shift_range = tuple(self.shift_range)


def augment(
    image: np.ndarray, labels: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Apply flips/rotations identically to image and labels; intensity
    scale/shift to the image only.  Geometric ops permute voxels, so
    per-class label counts never change."""
    if image.shape != labels.shape:
        raise ShapeError(f"image {image.shape} and labels {labels.shape} disagree")
    for axis in range(3):
        if rng.random() < cfg.flip_prob:
            image = np.flip(image, axis)
            labels = np.flip(labels, axis)
    if rng.random() < cfg.rotate_prob:
        quarter_turns = int(rng.integers(0, 4))
        if image.shape[1] != image.shape[2] and quarter_turns % 2 == 1:
            quarter_turns = 2   # odd turns would change a non-square axial plane
        image = np.rot90(image, quarter_turns, axes=(1, 2))
        labels = np.rot90(labels, quarter_turns, axes=(1, 2))
    image = np.ascontiguousarray(image)
    labels = np.ascontiguousarray(labels)
    if rng.random() < cfg.intensity_scale_prob:
        image = image * rng.uniform(*cfg.scale_range)
    if rng.random() < cfg.intensity_shift_prob:
        image = image + rng.uniform(*cfg.shift_range)
    return image, labels
