"""Deterministic desk-scale test assets.

Multi-organ phantoms: disjoint geometric "organs" (spheres, ellipsoids
or boxes) on a uniform background, with HU-like intensities so the
clip/normalize preprocessing paths do real work.  Surrogate 2D
checkpoints: archives with every inheritable 2D parameter name/shape the
encoder importer expects, filled with seeded pseudo-random values.

Everything here is a pure function of (spec, seed).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .archive import CheckpointArchive
from .encoder import EncoderConfig, expected_2d_entries
from .errors import ConfigError, PlacementError
from .volumes import LabelMap, Volume

_SHAPE_FAMILIES = ("sphere", "ellipsoid", "box")

MAX_PLACEMENT_ATTEMPTS = 1000


@dataclass
class PhantomSpec:
    grid_shape: tuple[int, int, int] = (32, 32, 32)
    spacing_mm: tuple[float, float, float] = (1.0, 1.0, 1.0)
    num_organs: int = 1
    shape_family: str = "sphere"
    organ_intensity: Optional[Sequence[float]] = None   # default: spread over [0, 300]
    background_intensity: float = -100.0
    noise_sigma: float = 0.0
    seed: int = 0
    # optional explicit geometry (one entry per organ); random when None
    centers: Optional[Sequence[tuple[int, int, int]]] = None
    radii: Optional[Sequence] = None                     # scalar (sphere) or 3-tuple
    radius_range: Optional[tuple[int, int]] = None       # voxels, inclusive

    def __post_init__(self):
        self.grid_shape = tuple(self.grid_shape)
        self.spacing_mm = tuple(self.spacing_mm)
        if any(g < 8 for g in self.grid_shape):
            raise ConfigError(f"grid_shape components must be >= 8, got {self.grid_shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ConfigError(f"spacing must be positive, got {self.spacing_mm}")
        if self.num_organs < 1:
            raise ConfigError("num_organs must be >= 1")
        if self.shape_family not in _SHAPE_FAMILIES:
            raise ConfigError(f"shape_family must be one of {_SHAPE_FAMILIES}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be nonnegative")
        if self.organ_intensity is not None and len(self.organ_intensity) != self.num_organs:
            raise ConfigError("organ_intensity must list one value per organ")

    def intensities(self) -> np.ndarray:
        if self.organ_intensity is not None:
            return np.asarray(self.organ_intensity, dtype=np.float64)
        return np.linspace(300.0, 100.0, self.num_organs)

    def default_radius_range(self) -> tuple[int, int]:
        if self.radius_range is not None:
            lo, hi = self.radius_range
        else:
            m = min(self.grid_shape)
            lo, hi = max(2, m // 10), max(3, m // 5)
        if lo < 1 or hi < lo:
            raise ConfigError(f"bad radius range ({lo}, {hi})")
        return int(lo), int(hi)


def _organ_mask(family: str, grid, center, radii) -> np.ndarray:
    zz, yy, xx = np.indices(grid)
    cz, cy, cx = center
    if family == "sphere":
        r = radii if np.isscalar(radii) else radii[0]
        return (zz - cz) ** 2 + (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    az, ay, ax = (radii, radii, radii) if np.isscalar(radii) else radii
    if family == "ellipsoid":
        return ((zz - cz) / az) ** 2 + ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
    return (np.abs(zz - cz) <= az) & (np.abs(yy - cy) <= ay) & (np.abs(xx - cx) <= ax)


def _dilate6(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    for axis in range(3):
        for shift in (1, -1):
            out |= np.roll(mask, shift, axis=axis) & _roll_valid(mask.shape, axis, shift)
    return out


def _roll_valid(shape, axis, shift) -> np.ndarray:
    # mask of positions whose np.roll source was not wrapped
    valid = np.ones(shape, dtype=bool)
    idx = [slice(None)] * 3
    idx[axis] = 0 if shift == 1 else -1
    valid[tuple(idx)] = False
    return valid


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Render the phantom; identical spec (including seed) gives identical
    arrays.  Raises PlacementError naming the organ that could not be
    placed disjointly."""
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed))
    grid = tuple(spec.grid_shape)
    labels = np.zeros(grid, dtype=np.int16)
    occupied_halo = np.zeros(grid, dtype=bool)   # organs dilated by one voxel
    lo, hi = spec.default_radius_range()

    for organ in range(spec.num_organs):
        placed = False
        for _ in range(MAX_PLACEMENT_ATTEMPTS):
            if spec.radii is not None:
                radii = spec.radii[organ]
            elif spec.shape_family == "sphere":
                radii = int(rng.integers(lo, hi + 1))
            else:
                radii = tuple(int(r) for r in rng.integers(lo, hi + 1, size=3))
            rmax = int(np.ceil(radii if np.isscalar(radii) else max(radii)))
            if spec.centers is not None:
                center = tuple(int(c) for c in spec.centers[organ])
            else:
                if any(g - 1 - rmax < rmax for g in grid):
                    continue   # shape cannot fit this grid at this size
                center = tuple(int(rng.integers(rmax, g - rmax)) for g in grid)
            mask = _organ_mask(spec.shape_family, grid, center, radii)
            if not mask.any():
                continue
            if (mask & occupied_halo).any():
                if spec.centers is not None:
                    break   # explicit geometry cannot be re-rolled
                continue
            labels[mask] = organ + 1
            occupied_halo |= _dilate6(mask)
            placed = True
            break
        if not placed:
            raise PlacementError(
                f"organ {organ}: no disjoint placement found in "
                f"{MAX_PLACEMENT_ATTEMPTS} attempts"
            )

    volume = np.full(grid, float(spec.background_intensity), dtype=np.float64)
    for organ, value in enumerate(spec.intensities(), start=1):
        volume[labels == organ] = value
    if spec.noise_sigma > 0:
        volume += rng.normal(0.0, spec.noise_sigma, size=grid)
    vol = Volume(volume.astype(np.float32), spec.spacing_mm)
    lab = LabelMap(labels, spec.num_organs, spec.spacing_mm)
    return vol, lab


def generate_phantom_dataset(spec: PhantomSpec, count: int) -> list[tuple[Volume, LabelMap]]:
    """Independent phantoms with per-case seeds derived from spec.seed."""
    cases = []
    for i in range(count):
        case_spec = PhantomSpec(**{**spec.__dict__, "seed": spec.seed + i})
        cases.append(generate_phantom(case_spec))
    return cases


@dataclass
class DatasetSpec:
    """Batched phantom synthesis: case count, split sizes, file format."""

    cases: int = 10
    splits: dict = field(default_factory=dict)   # e.g. {"train": 6, "val": 2, "test": 2}
    file_format: str = "nii.gz"                  # nii.gz | nii | rawvol
    phantom: PhantomSpec = field(default_factory=PhantomSpec)

    def __post_init__(self):
        if not self.splits:
            self.splits = {"train": self.cases}
        if self.cases < 1:
            raise ConfigError("cases must be >= 1")
        if self.file_format not in ("nii.gz", "nii", "rawvol"):
            raise ConfigError(f"unknown file_format {self.file_format!r}")
        if sum(self.splits.values()) != self.cases:
            raise ConfigError(
                f"splits {self.splits} must sum to cases ({self.cases})"
            )


def synthesize_dataset(spec: DatasetSpec, out_dir) -> "Path":
    """Write images/, labels/ and manifest.csv; byte-deterministic for a
    fixed spec."""
    from pathlib import Path

    from .volumes import ManifestEntry, save_labelmap, save_volume, write_manifest

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "labels").mkdir(parents=True, exist_ok=True)
    split_of = []
    for split, n in spec.splits.items():
        split_of.extend([split] * n)
    entries = []
    for i, (vol, lab) in enumerate(generate_phantom_dataset(spec.phantom, spec.cases)):
        ext = spec.file_format
        image_rel = f"images/case_{i:04d}.{ext}"
        label_rel = f"labels/case_{i:04d}.{ext}"
        if ext == "rawvol":
            save_volume(out_dir / image_rel, vol, labels=None)
        else:
            save_volume(out_dir / image_rel, vol)
        save_labelmap(out_dir / label_rel, lab)
        entries.append(ManifestEntry(image_rel, label_rel, split_of[i]))
    manifest_path = out_dir / "manifest.csv"
    write_manifest(manifest_path, entries)
    return manifest_path


# ---------------------------------------------------------------------------
# Surrogate 2D checkpoints
# ---------------------------------------------------------------------------

def generate_surrogate_2d_checkpoint(cfg: EncoderConfig, seed: int) -> CheckpointArchive:
    """Stand-in for a pretrained 2D backbone: every inheritable entry the
    importer expects, with seeded values at sane scales (unit-ish norms,
    small projections)."""
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    archive = CheckpointArchive()
    archive.meta["kind"] = "surrogate-2d-encoder"
    archive.meta["seed"] = int(seed)
    for name, shape in expected_2d_entries(cfg).items():
        if name.endswith("norm1.weight") or name.endswith("norm2.weight"):
            value = 1.0 + 0.02 * rng.standard_normal(shape)
        elif name.endswith("bias"):
            value = 0.02 * rng.standard_normal(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else int(shape[0])
            value = rng.standard_normal(shape) / np.sqrt(max(fan_in, 1))
        # norms are imported but trained; everything else inherits frozen
        inherited_frozen = ".norm1." not in name and ".norm2." not in name
        archive.add(name, value.astype(np.float32), frozen=inherited_frozen)
    return archive
