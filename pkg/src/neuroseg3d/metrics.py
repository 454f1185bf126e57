"""Segmentation evaluation: Dice, lesion-wise F1 via 3D connected components,
simple lesion count difference, volume difference, and report aggregation.

Component-overlap definitions: a true positive is a ground-truth component
overlapping at least one predicted voxel; a false positive is a predicted
component with no ground-truth overlap; a false negative is a ground-truth
component with no predicted overlap. Note TP + FN equals the ground-truth
component count, and a single predicted component may account for several
true positives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .volumes import ValidationError

_STRUCTURES = {
    6: ndimage.generate_binary_structure(3, 1),
    26: ndimage.generate_binary_structure(3, 3),
}


def _check_binary(mask: np.ndarray, name: str) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.ndim != 3:
        raise ValidationError(f"{name} must be a 3D array, got rank {mask.ndim}")
    if mask.dtype != bool and not np.all(np.isin(np.unique(mask), (0, 1))):
        raise ValidationError(f"{name} must be binary")
    return mask.astype(bool)


def _check_pair(pred: np.ndarray, gt: np.ndarray):
    pred = _check_binary(pred, "prediction")
    gt = _check_binary(gt, "ground truth")
    if pred.shape != gt.shape:
        raise ValidationError(f"shape mismatch: prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def connected_components(binary_mask: np.ndarray, connectivity: int = 26):
    """Label a binary mask; returns (labels 1..n, n)."""
    mask = _check_binary(binary_mask, "mask")
    if connectivity not in _STRUCTURES:
        raise ValidationError(f"connectivity must be 6 or 26, got {connectivity}")
    labels, n = ndimage.label(mask, structure=_STRUCTURES[connectivity])
    return labels, int(n)


def dice(pred_mask: np.ndarray, gt_mask: np.ndarray) -> float:
    """2|P & G| / (|P| + |G|); 1.0 when both masks are empty."""
    pred, gt = _check_pair(pred_mask, gt_mask)
    p, g = int(pred.sum()), int(gt.sum())
    if p + g == 0:
        return 1.0
    return 2.0 * int(np.logical_and(pred, gt).sum()) / (p + g)


def lesionwise_f1(pred_mask: np.ndarray, gt_mask: np.ndarray, connectivity: int = 26):
    """Component-overlap TP/FP/FN and F1 = 2TP / (2TP + FP + FN)."""
    pred, gt = _check_pair(pred_mask, gt_mask)
    gt_labels, n_gt = connected_components(gt, connectivity)
    pred_labels, n_pred = connected_components(pred, connectivity)

    tp = sum(1 for i in range(1, n_gt + 1) if pred[gt_labels == i].any())
    fn = n_gt - tp
    fp = sum(1 for j in range(1, n_pred + 1) if not gt[pred_labels == j].any())
    if tp + fp + fn == 0:
        f1 = 1.0  # both masks empty
    else:
        f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    return tp, fp, fn, f1


def volume_difference(pred_mask: np.ndarray, gt_mask: np.ndarray, spacing=(1.0, 1.0, 1.0)):
    """| |G| - |P| | in voxels and in mm^3 (voxel count x voxel volume)."""
    pred, gt = _check_pair(pred_mask, gt_mask)
    voxels = abs(int(gt.sum()) - int(pred.sum()))
    return voxels, voxels * float(np.prod(spacing))


def lesion_count_diff(pred_mask: np.ndarray, gt_mask: np.ndarray, connectivity: int = 26) -> int:
    pred, gt = _check_pair(pred_mask, gt_mask)
    _, n_gt = connected_components(gt, connectivity)
    _, n_pred = connected_components(pred, connectivity)
    return abs(n_gt - n_pred)


@dataclass
class CaseMetrics:
    subject_id: str = ""
    dice_per_class: list[float] = field(default_factory=list)
    dice_mean: float = 0.0
    volume_difference_voxels: int = 0
    volume_difference_mm3: float = 0.0
    lesion_count_diff: int = 0
    lesion_tp: int = 0
    lesion_fp: int = 0
    lesion_fn: int = 0
    lesion_f1: float = 0.0

    def as_row(self) -> dict:
        row = {
            "subject_id": self.subject_id,
            "dice_mean": self.dice_mean,
            "volume_difference_voxels": self.volume_difference_voxels,
            "volume_difference_mm3": self.volume_difference_mm3,
            "lesion_count_diff": self.lesion_count_diff,
            "lesion_tp": self.lesion_tp,
            "lesion_fp": self.lesion_fp,
            "lesion_fn": self.lesion_fn,
            "lesion_f1": self.lesion_f1,
        }
        for i, d in enumerate(self.dice_per_class):
            row[f"dice_class{i + 1}"] = d
        return row


@dataclass
class Report:
    cases: list[CaseMetrics]
    mean: dict[str, float]
    std: dict[str, float]

    @property
    def case_count(self) -> int:
        return len(self.cases)


AGGREGATE_FIELDS = (
    "dice_mean",
    "volume_difference_voxels",
    "volume_difference_mm3",
    "lesion_count_diff",
    "lesion_f1",
)


def evaluate_case(
    pred_probs: np.ndarray,
    gt_mask: np.ndarray,
    threshold: float = 0.5,
    spacing=(1.0, 1.0, 1.0),
    connectivity: int = 26,
    subject_id: str = "",
) -> CaseMetrics:
    """Binarize (K, D, H, W) class probabilities and compute all metrics.

    Dice is reported per class and averaged; the lesion-level scalars are
    computed on the first class channel (the whole-lesion class for nested
    masks, the only class for single-class tasks).
    """
    if not 0 < threshold < 1:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    probs = np.asarray(pred_probs)
    gt = np.asarray(gt_mask)
    if probs.ndim == 3:
        probs = probs[None]
    if gt.ndim == 3:
        gt = gt[None]
    if probs.shape != gt.shape:
        raise ValidationError(f"shape mismatch: prediction {probs.shape} vs mask {gt.shape}")

    pred = probs >= threshold
    per_class = [dice(pred[k], gt[k]) for k in range(gt.shape[0])]
    vd_vox, vd_mm3 = volume_difference(pred[0], gt[0], spacing)
    tp, fp, fn, f1 = lesionwise_f1(pred[0], gt[0], connectivity)
    return CaseMetrics(
        subject_id=subject_id,
        dice_per_class=per_class,
        dice_mean=float(np.mean(per_class)),
        volume_difference_voxels=vd_vox,
        volume_difference_mm3=vd_mm3,
        lesion_count_diff=lesion_count_diff(pred[0], gt[0], connectivity),
        lesion_tp=tp,
        lesion_fp=fp,
        lesion_fn=fn,
        lesion_f1=f1,
    )


def aggregate_report(cases: list[CaseMetrics]) -> Report:
    """Arithmetic mean and sample std (0 for a single case) per metric."""
    if not cases:
        raise ValidationError("cannot aggregate an empty case list")
    mean, std = {}, {}
    for name in AGGREGATE_FIELDS:
        values = np.array([getattr(c, name) for c in cases], dtype=np.float64)
        mean[name] = float(values.mean())
        std[name] = float(values.std(ddof=1)) if len(values) > 1 else 0.0
    return Report(cases=list(cases), mean=mean, std=std)
