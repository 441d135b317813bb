"""Resampling to a fixed voxel spacing and intensity clip/normalize.

Images are interpolated trilinearly (order configurable), labels by
nearest neighbor.  Voxel centers are aligned: output voxel ``j`` along an
axis samples the input at fractional index ``j * target / source``.

Normalization modes after clipping to ``[lo, hi]``:

* ``unit_interval``: lo -> 0, hi -> 1 linearly
* ``symmetric``: lo -> -1, hi -> +1 linearly
* ``shift_scale``: (x - shift) / scale

``PRESETS`` holds the clip/normalize/spacing settings used by the common
abdominal and pelvic CT corpora (BTCV, AMOS, CT-ORG, pelvic).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import ConfigError
from .volumes import LabelMap, Volume

NORMALIZATION_MODES = ("unit_interval", "symmetric", "shift_scale")


@dataclass
class PreprocessConfig:
    target_spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    clip_range: tuple[float, float] = (-125.0, 275.0)
    normalization: str = "unit_interval"
    shift: float = 0.0        # shift_scale mode only
    scale: float = 1.0
    interpolation_order: int = 1   # 1 = trilinear

    def __post_init__(self):
        self.target_spacing_mm = tuple(self.target_spacing_mm)
        self.clip_range = tuple(self.clip_range)
        lo, hi = self.clip_range
        if not lo < hi:
            raise ConfigError(f"clip_range lower bound must be < upper, got {self.clip_range}")
        if self.normalization not in NORMALIZATION_MODES:
            raise ConfigError(f"normalization must be one of {NORMALIZATION_MODES}")
        if self.normalization == "shift_scale" and self.scale == 0:
            raise ConfigError("shift_scale divisor must be nonzero")
        if any(s <= 0 for s in self.target_spacing_mm):
            raise ConfigError(f"target spacing must be positive, got {self.target_spacing_mm}")


# spacing stored (sz, sy, sx); the common tables list x*y*z
PRESETS: dict[str, PreprocessConfig] = {
    "btcv": PreprocessConfig((1.5, 1.0, 1.0), (-125.0, 275.0), "unit_interval"),
    "amos": PreprocessConfig((1.5, 1.0, 1.0), (-991.0, 362.0), "shift_scale",
                             shift=50.0, scale=141.0),
    "ct_org": PreprocessConfig((2.0, 2.0, 2.0), (-1000.0, 1000.0), "symmetric"),
    "pelvic": PreprocessConfig((1.5, 1.5, 1.5), (-50.0, 150.0), "unit_interval"),
}


def resample(
    volume: Volume,
    labels: Optional[LabelMap],
    target_spacing_mm,
    order: int = 1,
) -> tuple[Volume, Optional[LabelMap]]:
    """Resample to the target spacing.  Output shape is
    round(shape * spacing / target), at least 1 per axis."""
    target = tuple(float(s) for s in target_spacing_mm)
    if any(s <= 0 for s in target):
        raise ConfigError(f"target spacing must be positive, got {target}")
    source = volume.spacing_mm
    if target == source:
        out_labels = None if labels is None else LabelMap(
            labels.data.copy(), labels.num_classes, target)
        return Volume(volume.data.copy(), target, volume.origin_mm), out_labels

    in_shape = volume.shape
    out_shape = tuple(
        max(1, int(round(n * s / t))) for n, s, t in zip(in_shape, source, target)
    )
    axes = [np.arange(n, dtype=np.float64) * t / s
            for n, s, t in zip(out_shape, source, target)]
    coords = np.meshgrid(*axes, indexing="ij")

    data = ndimage.map_coordinates(
        volume.data.astype(np.float64), coords, order=order, mode="nearest"
    )
    out_vol = Volume(data.astype(volume.data.dtype), target, volume.origin_mm)
    out_labels = None
    if labels is not None:
        lab = ndimage.map_coordinates(labels.data, coords, order=0, mode="nearest")
        out_labels = LabelMap(lab.astype(labels.data.dtype), labels.num_classes, target)
    return out_vol, out_labels


def clip_and_normalize(volume: Volume, cfg: PreprocessConfig) -> Volume:
    """Clip to cfg.clip_range, then map intensities per cfg.normalization."""
    lo, hi = cfg.clip_range
    data = np.clip(volume.data.astype(np.float64), lo, hi)
    if cfg.normalization == "unit_interval":
        data = (data - lo) / (hi - lo)
    elif cfg.normalization == "symmetric":
        data = 2.0 * (data - lo) / (hi - lo) - 1.0
    else:
        data = (data - cfg.shift) / cfg.scale
    return Volume(data.astype(np.float32), volume.spacing_mm, volume.origin_mm)


def preprocess(
    volume: Volume, labels: Optional[LabelMap], cfg: PreprocessConfig
) -> tuple[Volume, Optional[LabelMap]]:
    """Full pipeline: resample to cfg spacing, then clip/normalize."""
    vol, lab = resample(volume, labels, cfg.target_spacing_mm, cfg.interpolation_order)
    return clip_and_normalize(vol, cfg), lab


def load_split(
    manifest_path,
    split: str,
    cfg: Optional[PreprocessConfig],
    num_classes: int,
) -> list[tuple[str, Volume, Optional[LabelMap]]]:
    """Load every manifest case of one split, preprocessing when cfg is
    given.  Paths are resolved relative to the manifest location; an
    empty label path yields a case without ground truth."""
    from pathlib import Path

    from .volumes import load_labelmap, load_volume, read_manifest

    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    cases = []
    for entry in read_manifest(manifest_path):
        if entry.split != split:
            continue
        image_path = base / entry.image
        vol, bundled = load_volume(image_path)
        labels = bundled
        if labels is None and entry.label:
            labels = load_labelmap(base / entry.label, num_classes=num_classes)
        if labels is not None:
            labels.num_classes = num_classes
        if cfg is not None:
            vol, labels = preprocess(vol, labels, cfg)
        case_id = Path(entry.image).name.split(".")[0]
        cases.append((case_id, vol, labels))
    return cases
