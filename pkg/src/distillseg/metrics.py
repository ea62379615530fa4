"""Confusion-matrix IoU and Dice for multi-class masks.

Classes absent from both prediction and ground truth are undefined (None)
and excluded from means; whether class 0 (background) joins the means is
configurable and defaults to including it.
"""
from __future__ import annotations

import numpy as np

Array = np.ndarray


class ConfusionMatrix:
    """K x K pixel counts, rows = ground truth class, cols = predicted."""

    def __init__(self, num_classes: int):
        if num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {num_classes}")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def accumulate(self, pred: Array, gt: Array) -> "ConfusionMatrix":
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: pred {list(pred.shape)} vs gt {list(gt.shape)}")
        if pred.size == 0:
            return self
        k = self.num_classes
        for name, arr in (("pred", pred), ("gt", gt)):
            lo, hi = int(arr.min()), int(arr.max())
            if lo < 0 or hi >= k:
                raise ValueError(f"{name} labels must lie in [0, {k}), found {lo}..{hi}")
        flat = gt.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
        self.counts += np.bincount(flat, minlength=k * k).reshape(k, k)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different sizes")
        self.counts += other.counts
        return self

    @property
    def pixels(self) -> int:
        return int(self.counts.sum())


def _tp_fp_fn(cm: ConfusionMatrix) -> tuple[Array, Array, Array]:
    tp = np.diag(cm.counts).astype(np.float64)
    fp = cm.counts.sum(axis=0).astype(np.float64) - tp
    fn = cm.counts.sum(axis=1).astype(np.float64) - tp
    return tp, fp, fn


def iou_per_class(cm: ConfusionMatrix) -> list[float | None]:
    tp, fp, fn = _tp_fp_fn(cm)
    out: list[float | None] = []
    for k in range(cm.num_classes):
        denom = tp[k] + fp[k] + fn[k]
        out.append(None if denom == 0 else float(tp[k] / denom))
    return out


def dice_per_class(cm: ConfusionMatrix) -> list[float | None]:
    tp, fp, fn = _tp_fp_fn(cm)
    out: list[float | None] = []
    for k in range(cm.num_classes):
        denom = 2 * tp[k] + fp[k] + fn[k]
        out.append(None if denom == 0 else float(2 * tp[k] / denom))
    return out


def _mean_defined(values: list[float | None], include_background: bool) -> float:
    start = 0 if include_background else 1
    defined = [v for v in values[start:] if v is not None]
    if not defined:
        raise ValueError("no evaluable classes: every class is absent from pred and gt")
    return float(np.mean(defined))


def mean_iou(cm: ConfusionMatrix, include_background: bool = True) -> float:
    return _mean_defined(iou_per_class(cm), include_background)


def mean_dice(cm: ConfusionMatrix, include_background: bool = True) -> float:
    return _mean_defined(dice_per_class(cm), include_background)


def metrics_report(cm: ConfusionMatrix, config_hash: str, include_background: bool = True) -> dict:
    """JSON-ready metrics summary for one evaluation."""
    return {
        "per_class_iou": iou_per_class(cm),
        "per_class_dice": dice_per_class(cm),
        "mean_iou": mean_iou(cm, include_background),
        "mean_dice": mean_dice(cm, include_background),
        "pixels_evaluated": cm.pixels,
        "include_background": include_background,
        "config_hash": config_hash,
    }
