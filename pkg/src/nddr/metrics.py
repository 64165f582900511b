"""Evaluation metrics and the (step, task, metric, value) log.

Segmentation metrics come from an accumulated confusion matrix; angle
metrics from per-pixel arccos of clamped dot products; scalar regression
readouts from the expectation of a class distribution. Medians use the
lower-middle element for even counts so results never interpolate.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

__all__ = [
    "confusion_matrix",
    "seg_metrics",
    "normal_metrics",
    "median_low",
    "age_expectation",
    "abs_error_stats",
    "classification_accuracy",
    "ANGLE_THRESHOLDS",
    "MetricsLog",
]

ANGLE_THRESHOLDS = (11.25, 22.5, 30.0)


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore_label: int = 255) -> np.ndarray:
    """(n_classes, n_classes) counts indexed [gt, pred], ignoring gt==ignore_label."""
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt sizes differ: {pred.shape} vs {gt.shape}")
    valid = gt != ignore_label
    pred = pred[valid]
    gt = gt[valid]
    if ((pred < 0) | (pred >= n_classes)).any():
        raise ValueError(f"predictions outside [0,{n_classes})")
    if ((gt < 0) | (gt >= n_classes)).any():
        raise ValueError(f"labels outside [0,{n_classes}) after ignore filtering")
    binned = np.bincount(gt.astype(np.int64) * n_classes + pred.astype(np.int64), minlength=n_classes * n_classes)
    return binned.reshape(n_classes, n_classes)


def seg_metrics_from_confusion(cm: np.ndarray) -> dict:
    total = cm.sum()
    if total == 0:
        return {"miou": 0.0, "pixel_acc": 0.0}
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    present = union > 0  # classes absent from both gt and pred do not count
    iou = tp[present] / union[present]
    return {"miou": float(iou.mean()), "pixel_acc": float(tp.sum() / total)}


def seg_metrics(pred: np.ndarray, gt: np.ndarray, n_classes: int, ignore_label: int = 255) -> dict:
    return seg_metrics_from_confusion(confusion_matrix(pred, gt, n_classes, ignore_label))


def median_low(values: np.ndarray) -> float:
    """Lower-middle order statistic; no interpolation for even counts."""
    values = np.asarray(values).reshape(-1)
    if values.size == 0:
        raise ValueError("median of an empty set")
    return float(np.sort(values)[(values.size - 1) // 2])


def angles_deg(pred: np.ndarray, gt: np.ndarray, mask: Optional[np.ndarray] = None, eps: float = 1e-8) -> np.ndarray:
    """Per-element angles (degrees) between l2-normalized pred and gt vectors.

    pred/gt: (..., D); mask: (...) selecting which positions count.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt shapes differ: {pred.shape} vs {gt.shape}")
    pn = pred / np.maximum(np.linalg.norm(pred, axis=-1, keepdims=True), eps)
    gn = gt / np.maximum(np.linalg.norm(gt, axis=-1, keepdims=True), eps)
    dot = np.clip((pn * gn).sum(axis=-1), -1.0, 1.0)
    ang = np.degrees(np.arccos(dot))
    if mask is not None:
        mask = np.asarray(mask).astype(bool)
        if mask.shape != ang.shape:
            raise ValueError(f"mask shape {mask.shape} does not match {ang.shape}")
        ang = ang[mask]
    return ang.reshape(-1)


def normal_metrics(
    pred: np.ndarray,
    gt: np.ndarray,
    mask: Optional[np.ndarray] = None,
    thresholds: Sequence[float] = ANGLE_THRESHOLDS,
) -> dict:
    """Mean/median angle plus the within-t fraction for each threshold."""
    ang = angles_deg(pred, gt, mask)
    return metrics_from_angles(ang, thresholds)


def metrics_from_angles(ang: np.ndarray, thresholds: Sequence[float] = ANGLE_THRESHOLDS) -> dict:
    ang = np.asarray(ang).reshape(-1)
    if ang.size == 0:
        raise ValueError("no supervised pixels: angle metrics undefined")
    out = {"mean_angle": float(ang.mean()), "median_angle": median_low(ang)}
    for t in thresholds:
        out[f"within_{t:g}"] = float((ang <= t).mean())
    return out


def age_expectation(probs: np.ndarray) -> np.ndarray:
    """Expected value sum_k p(k)*k of a distribution over classes {0..K-1}.

    probs: (N, K). Rows that do not sum to ~1 draw a warning (the readout
    assumes softmax output) but are still reduced.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError(f"probs must be (N, K), got {probs.shape}")
    sums = probs.sum(axis=1)
    if np.abs(sums - 1.0).max(initial=0.0) > 1e-5:
        warnings.warn("age_expectation: rows do not sum to 1; expected softmax output", stacklevel=2)
    return probs @ np.arange(probs.shape[1], dtype=np.float64)


def abs_error_stats(pred: np.ndarray, gt: np.ndarray) -> dict:
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1)
    if pred.size == 0:
        raise ValueError("no predictions: absolute-error stats undefined")
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt sizes differ: {pred.shape} vs {gt.shape}")
    err = np.abs(pred - gt)
    return {"mean_ae": float(err.mean()), "median_ae": median_low(err)}


def classification_accuracy(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred).reshape(-1)
    gt = np.asarray(gt).reshape(-1)
    if pred.size == 0:
        raise ValueError("no predictions: accuracy undefined")
    if pred.shape != gt.shape:
        raise ValueError(f"pred and gt sizes differ: {pred.shape} vs {gt.shape}")
    return float((pred == gt).mean())


@dataclass
class MetricsLog:
    """Append-only (step, task, metric, value) rows, serialized two ways:
    a JSON-lines event stream and a CSV summary with that fixed column order."""

    rows: list = field(default_factory=list)

    def add(self, step: int, task: str, metric: str, value: float) -> None:
        self.rows.append((int(step), str(task), str(metric), float(value)))

    def last(self, task: str, metric: str) -> Optional[float]:
        for step, t, m, v in reversed(self.rows):
            if t == task and m == metric:
                return v
        return None

    def write_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for step, task, metric, value in self.rows:
                fh.write(json.dumps({"step": step, "task": task, "metric": metric, "value": value}) + "\n")

    def write_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["step", "task", "metric", "value"])
            for row in self.rows:
                writer.writerow([row[0], row[1], row[2], repr(row[3])])
