"""Overlap (Dice) and boundary (normalized surface distance) metrics.

Dice per class: ``2 * |intersection| / (|pred| + |gt|) * 100``; both masks
empty scores 100, exactly one empty scores 0.

Surface distance: a surface voxel is a foreground voxel with at least one
face-adjacent (6-connectivity) background neighbor, where the volume
border counts as background.  The score at tolerance ``tau`` is the
fraction of surface voxels of either mask that lie within ``tau``
millimeters (via voxel spacing) of the other mask's surface, times 100.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, ContractError, ShapeError
from .volumes import LabelMap

_FACE_STRUCT = ndimage.generate_binary_structure(3, 1)


def dice_score(pred: LabelMap, gt: LabelMap, class_id: int) -> float:
    """Binary per-class Dice in percent."""
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    p = pred.data == class_id
    g = gt.data == class_id
    np_, ng = int(p.sum()), int(g.sum())
    if np_ == 0 and ng == 0:
        return 100.0
    if np_ == 0 or ng == 0:
        return 0.0
    inter = int((p & g).sum())
    return 200.0 * inter / (np_ + ng)


def surface_voxels(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with a face-adjacent background neighbor; the
    border counts as background."""
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.zeros_like(mask)
    interior = ndimage.binary_erosion(mask, structure=_FACE_STRUCT, border_value=0)
    return mask & ~interior


def nsd_score(
    pred: LabelMap, gt: LabelMap, class_id: int, tolerance_mm: float, spacing_mm=None
) -> float:
    """Two-sided surface overlap at a physical tolerance, in percent."""
    if tolerance_mm <= 0:
        raise ContractError(f"tolerance must be positive, got {tolerance_mm}")
    if pred.shape != gt.shape:
        raise ShapeError(f"pred {pred.shape} and gt {gt.shape} differ")
    spacing = tuple(spacing_mm) if spacing_mm is not None else tuple(pred.spacing_mm)
    if spacing != tuple(gt.spacing_mm):
        raise ShapeError(f"spacing {spacing} and gt spacing {gt.spacing_mm} differ")

    sp = surface_voxels(pred.data == class_id)
    sg = surface_voxels(gt.data == class_id)
    n_sp, n_sg = int(sp.sum()), int(sg.sum())
    if n_sp == 0 and n_sg == 0:
        return 100.0
    if n_sp == 0 or n_sg == 0:
        return 0.0

    dist_to_sg = ndimage.distance_transform_edt(~sg, sampling=spacing)
    dist_to_sp = ndimage.distance_transform_edt(~sp, sampling=spacing)
    close_p = int((dist_to_sg[sp] <= tolerance_mm).sum())
    close_g = int((dist_to_sp[sg] <= tolerance_mm).sum())
    return 100.0 * (close_p + close_g) / (n_sp + n_sg)


# ---------------------------------------------------------------------------
# Case evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    case_id: str
    tolerance_mm: float
    dice: dict[int, float] = field(default_factory=dict)   # class -> percent
    nsd: dict[int, float] = field(default_factory=dict)
    mean_dice: float = 0.0
    mean_nsd: float = 0.0

    def to_record(self) -> dict:
        return {
            "case_id": self.case_id,
            "tolerance_mm": self.tolerance_mm,
            "dice": {str(k): v for k, v in self.dice.items()},
            "nsd": {str(k): v for k, v in self.nsd.items()},
            "mean_dice": self.mean_dice,
            "mean_nsd": self.mean_nsd,
        }


def score_case(
    case_id: str, pred: LabelMap, gt: LabelMap, num_classes: int, tolerance_mm
) -> MetricsReport:
    """Per-class Dice/NSD for one case.  ``tolerance_mm`` may be a scalar
    or a {class_id: tau} mapping."""
    report = MetricsReport(case_id=case_id, tolerance_mm=float(
        tolerance_mm if np.isscalar(tolerance_mm) else 0.0))
    taus = ({c: float(tolerance_mm) for c in range(1, num_classes + 1)}
            if np.isscalar(tolerance_mm) else dict(tolerance_mm))
    for c in range(1, num_classes + 1):
        if c not in taus:
            raise ConfigError(f"no tolerance configured for class {c}")
        report.dice[c] = dice_score(pred, gt, c)
        report.nsd[c] = nsd_score(pred, gt, c, taus[c])
    report.mean_dice = float(np.mean(list(report.dice.values())))
    report.mean_nsd = float(np.mean(list(report.nsd.values())))
    return report


@dataclass
class AggregateReport:
    num_cases: int
    skipped: list[str]
    per_class_dice: dict[int, float]
    per_class_nsd: dict[int, float]
    mean_dice_cases_then_classes: float
    mean_nsd_cases_then_classes: float
    mean_dice_classes_then_cases: float
    mean_nsd_classes_then_cases: float

    def to_record(self) -> dict:
        return {
            "num_cases": self.num_cases,
            "skipped": self.skipped,
            "per_class_dice": {str(k): v for k, v in self.per_class_dice.items()},
            "per_class_nsd": {str(k): v for k, v in self.per_class_nsd.items()},
            "mean_dice_cases_then_classes": self.mean_dice_cases_then_classes,
            "mean_nsd_cases_then_classes": self.mean_nsd_cases_then_classes,
            "mean_dice_classes_then_cases": self.mean_dice_classes_then_cases,
            "mean_nsd_classes_then_cases": self.mean_nsd_classes_then_cases,
        }


def aggregate_reports(reports: list[MetricsReport], skipped=()) -> AggregateReport:
    """Mean over cases per class, then over classes; the per-case-mean
    ordering is reported as well."""
    if not reports:
        return AggregateReport(0, list(skipped), {}, {}, 0.0, 0.0, 0.0, 0.0)
    classes = sorted(reports[0].dice)
    per_class_dice = {c: float(np.mean([r.dice[c] for r in reports])) for c in classes}
    per_class_nsd = {c: float(np.mean([r.nsd[c] for r in reports])) for c in classes}
    return AggregateReport(
        num_cases=len(reports),
        skipped=list(skipped),
        per_class_dice=per_class_dice,
        per_class_nsd=per_class_nsd,
        mean_dice_cases_then_classes=float(np.mean(list(per_class_dice.values()))),
        mean_nsd_cases_then_classes=float(np.mean(list(per_class_nsd.values()))),
        mean_dice_classes_then_cases=float(np.mean([r.mean_dice for r in reports])),
        mean_nsd_classes_then_cases=float(np.mean([r.mean_nsd for r in reports])),
    )


def write_metric_records(path, reports: list[MetricsReport], aggregate: AggregateReport):
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps({"type": "case", **r.to_record()}, sort_keys=True) + "\n")
        fh.write(json.dumps({"type": "aggregate", **aggregate.to_record()}, sort_keys=True) + "\n")


def format_metric_table(reports: list[MetricsReport], aggregate: AggregateReport) -> str:
    lines = [f"{'case':<16}{'class':>6}{'dice %':>10}{'nsd %':>10}"]
    for r in reports:
        for c in sorted(r.dice):
            lines.append(f"{r.case_id:<16}{c:>6}{r.dice[c]:>10.2f}{r.nsd[c]:>10.2f}")
    lines.append(
        f"{'mean':<16}{'all':>6}"
        f"{aggregate.mean_dice_cases_then_classes:>10.2f}"
        f"{aggregate.mean_nsd_cases_then_classes:>10.2f}"
    )
    return "\n".join(lines)
