"""Confusion-matrix metrics: per-class IoU, mIoU, overall accuracy, Cohen's kappa."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np

from .errors import DataError, EmptyEvaluationError


class ConfusionMatrix:
    """K x K pixel counts; rows are ground truth, columns are predictions."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None):
        self.num_classes = int(num_classes)
        if counts is None:
            counts = np.zeros((num_classes, num_classes), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (num_classes, num_classes) or (counts < 0).any():
            raise DataError(f"confusion counts must be non-negative {num_classes}x{num_classes}")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(self, pred: np.ndarray, label: np.ndarray, ignore_index: int = 255) -> "ConfusionMatrix":
        return confusion_update(self, pred, label, ignore_index)

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DataError("cannot merge confusion matrices with different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    __add__ = merge

    def summary(self) -> dict:
        return summary(self)

    def __eq__(self, other) -> bool:
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self) -> str:
        return f"ConfusionMatrix({self.counts.tolist()})"


def _check_range(values: np.ndarray, k: int, what: str, skip: Optional[np.ndarray] = None) -> None:
    bad = (values < 0) | (values >= k)
    if skip is not None:
        bad &= ~skip
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"{what} value {int(values[pos])} out of range [0, {k}) at {pos}")


def confusion_update(cm: ConfusionMatrix, pred: np.ndarray, label: np.ndarray, ignore_index: int = 255) -> ConfusionMatrix:
    """Add one image (or batch) of predictions to ``cm`` in place and return it."""
    pred = np.asarray(pred).astype(np.int64)
    label = np.asarray(label).astype(np.int64)
    if pred.shape != label.shape:
        raise DataError(f"prediction shape {pred.shape} differs from label shape {label.shape}")
    k = cm.num_classes
    ignored = label == ignore_index
    _check_range(label, k, "label", ignored)
    _check_range(pred, k, "prediction", ignored)
    keep = ~ignored
    idx = label[keep] * k + pred[keep]
    cm.counts += np.bincount(idx, minlength=k * k).reshape(k, k)
    return cm


def summary(cm: ConfusionMatrix) -> dict:
    """IoU per class (NaN where the class is absent), mIoU, OA and kappa."""
    c = cm.counts.astype(np.float64)
    n = c.sum()
    if n == 0:
        raise EmptyEvaluationError("confusion matrix is empty")
    tp = np.diag(c)
    rows = c.sum(axis=1)
    cols = c.sum(axis=0)
    union = rows + cols - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, tp / np.where(union > 0, union, 1), np.nan)
    present = ~np.isnan(iou)
    miou = float(iou[present].mean()) if present.any() else float("nan")
    oa = float(tp.sum() / n)
    pe = float((rows * cols).sum() / (n * n))
    if pe == 1.0:
        kappa = 1.0 if oa == 1.0 else 0.0
    else:
        kappa = (oa - pe) / (1.0 - pe)
    return {"iou": iou.tolist(), "miou": miou, "oa": oa, "kappa": float(kappa), "pe": pe}


def format_report(s: dict, class_names: Optional[Sequence[str]] = None, title: str = "") -> str:
    """Plain-text table of per-class IoU followed by the scalar metrics."""
    names = list(class_names) if class_names is not None else [f"class{i}" for i in range(len(s["iou"]))]
    width = max(len(n) for n in names + ["class"])
    lines = [title] if title else []
    lines.append(f"{'class':<{width}}  IoU")
    for name, v in zip(names, s["iou"]):
        lines.append(f"{name:<{width}}  {'absent' if v != v else f'{100 * v:6.2f}'}")
    lines.append(f"mIoU   {100 * s['miou']:.2f}")
    lines.append(f"OA     {100 * s['oa']:.2f}")
    lines.append(f"Kappa  {100 * s['kappa']:.2f}")
    return "\n".join(lines) + "\n"


def csv_header(num_classes: int) -> List[str]:
    return ["model", "seed", "miou", "oa", "kappa"] + [f"iou_{i}" for i in range(num_classes)]


def csv_row(model: str, seed: int, s: dict) -> List:
    return [model, seed, f"{s['miou']:.6f}", f"{s['oa']:.6f}", f"{s['kappa']:.6f}"] + [
        "nan" if v != v else f"{v:.6f}" for v in s["iou"]
    ]


def to_csv(rows: Sequence[Sequence], num_classes: int) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(csv_header(num_classes))
    w.writerows(rows)
    return buf.getvalue()
