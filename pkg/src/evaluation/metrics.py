#!/usr/bin/env python3
"""
Segmentation and stereo metrics
Confusion-matrix based Acc / mAcc / Pre / Rec / mFSc / mIoU / fwIoU (percent)
and EPE / PEP@1 / PEP@3 for disparity.
"""

from dataclasses import asdict, dataclass
from typing import Dict, Optional, Sequence, Union

import numpy as np
import torch

from common.errors import LabelRangeError, ShapeMismatchError

ArrayLike = Union[np.ndarray, torch.Tensor]
PEP_THRESHOLDS = (1.0, 3.0)


def _np(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions"""
    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "ConfusionMatrix":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return int(self.counts.shape[0])

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if self.counts.shape != other.counts.shape:
            raise ShapeMismatchError(f"cannot merge {self.counts.shape} and {other.counts.shape} matrices")
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class SegReport:
    Acc: float
    mAcc: float
    Pre: float
    Rec: float
    mFSc: float
    mIoU: float
    fwIoU: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


@dataclass
class StereoReport:
    EPE: float
    PEP1: float
    PEP3: float

    def as_dict(self) -> Dict[str, float]:
        return asdict(self)


def confusion(pred_labels: ArrayLike, gt_labels: ArrayLike, num_classes: int,
              ignore_mask: Optional[ArrayLike] = None) -> ConfusionMatrix:
    """Exact pixel counts; pixels where ignore_mask is True are skipped"""
    pred = _np(pred_labels).astype(np.int64).ravel()
    gt = _np(gt_labels).astype(np.int64).ravel()
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction has {pred.size} pixels, ground truth {gt.size}")
    keep = np.ones_like(gt, dtype=bool)
    if ignore_mask is not None:
        keep = ~_np(ignore_mask).astype(bool).ravel()
    pred, gt = pred[keep], gt[keep]
    for name, arr in (('ground truth', gt), ('prediction', pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise LabelRangeError(f"{name} label outside [0, {num_classes})")
    counts = np.bincount(num_classes * gt + pred, minlength=num_classes ** 2)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes).astype(np.int64))


def seg_metrics(cm: ConfusionMatrix, macro_pre_rec: bool = False) -> SegReport:
    """Means run over classes present in the ground truth; Pre/Rec are
    frequency-weighted unless macro_pre_rec"""
    counts = cm.counts.astype(np.float64)
    total = counts.sum()
    if total <= 0:
        raise ShapeMismatchError("empty confusion matrix")
    diag = np.diag(counts)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    present = rows > 0

    with np.errstate(divide='ignore', invalid='ignore'):
        recall = np.where(rows > 0, diag / rows, 0.0)
        precision = np.where(cols > 0, diag / cols, 0.0)
        iou = np.where(rows + cols - diag > 0, diag / (rows + cols - diag), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)

    freq = rows / total
    if macro_pre_rec:
        pre = precision[present].mean()
        rec = recall[present].mean()
    else:
        pre = (freq * precision).sum()
        rec = (freq * recall).sum()

    return SegReport(
        Acc=100.0 * diag.sum() / total,
        mAcc=100.0 * recall[present].mean(),
        Pre=100.0 * pre,
        Rec=100.0 * rec,
        mFSc=100.0 * f1[present].mean(),
        mIoU=100.0 * iou[present].mean(),
        fwIoU=100.0 * (freq * iou).sum(),
    )


def stereo_metrics(disp_pred: ArrayLike, disp_gt: ArrayLike, valid: ArrayLike,
                   thresholds: Sequence[float] = PEP_THRESHOLDS) -> StereoReport:
    pred = _np(disp_pred).astype(np.float64).ravel()
    gt = _np(disp_gt).astype(np.float64).ravel()
    mask = _np(valid).astype(bool).ravel()
    if pred.shape != gt.shape or gt.shape != mask.shape:
        raise ShapeMismatchError("disparity prediction, ground truth and mask differ in size")
    if not mask.any():
        raise ShapeMismatchError("no valid disparity pixels to evaluate")
    err = np.abs(pred[mask] - gt[mask])
    return StereoReport(
        EPE=float(err.mean()),
        PEP1=float(100.0 * (err > thresholds[0]).mean()),
        PEP3=float(100.0 * (err > thresholds[1]).mean()),
    )


class StereoAccumulator:
    """Running sums so a dataset-level EPE/PEP weighs every valid pixel once"""

    def __init__(self, thresholds: Sequence[float] = PEP_THRESHOLDS):
        self.thresholds = tuple(thresholds)
        self.count = 0
        self.abs_err = 0.0
        self.bad = [0, 0]

    def update(self, disp_pred: ArrayLike, disp_gt: ArrayLike, valid: ArrayLike) -> None:
        mask = _np(valid).astype(bool).ravel()
        if not mask.any():
            return
        err = np.abs(_np(disp_pred).astype(np.float64).ravel()[mask] - _np(disp_gt).astype(np.float64).ravel()[mask])
        self.count += err.size
        self.abs_err += float(err.sum())
        self.bad[0] += int((err > self.thresholds[0]).sum())
        self.bad[1] += int((err > self.thresholds[1]).sum())

    def report(self) -> StereoReport:
        if self.count == 0:
            raise ShapeMismatchError("no valid disparity pixels to evaluate")
        return StereoReport(EPE=self.abs_err / self.count,
                            PEP1=100.0 * self.bad[0] / self.count,
                            PEP3=100.0 * self.bad[1] / self.count)


def branch_disagreement(branch_logits: Sequence[ArrayLike]) -> float:
    """Fraction of pixels where some branch's argmax differs from the main branch"""
    labels = [_np(x).argmax(axis=1) for x in branch_logits]
    if len(labels) < 2:
        return 0.0
    differ = np.zeros_like(labels[0], dtype=bool)
    for other in labels[1:]:
        differ |= other != labels[0]
    return float(differ.mean())


def to_kv_table(values: Dict[str, float], precision: int = 4) -> str:
    """One `key value` pair per line, keys left-aligned"""
    if not values:
        return ""
    width = max(len(k) for k in values)
    lines = []
    for key, value in values.items():
        if isinstance(value, float):
            lines.append(f"{key:<{width}}  {value:.{precision}f}")
        else:
            lines.append(f"{key:<{width}}  {value}")
    return "\n".join(lines) + "\n"
