"""Confusion-matrix IoU evaluation with old/new/all splits."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .data import Scene, TaskSchedule
from .model import SegNet, predict, upsample_labels


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    """(num_classes, num_classes) counts, rows = ground truth, cols = prediction."""
    pred = pred.reshape(-1)
    gt = gt.reshape(-1)
    valid = (gt >= 0) & (gt < num_classes)
    idx = num_classes * gt[valid] + pred[valid]
    return np.bincount(idx, minlength=num_classes**2).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> np.ndarray:
    """Per-class IoU; NaN where a class never occurs in gt or prediction."""
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(union > 0, inter / union, np.nan)


@dataclass
class StepMetrics:
    """IoU summary after one incremental step."""

    step: int
    per_class_iou: dict[int, float | None]
    miou_old: float
    miou_new: float | None
    miou_all: float

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "miou_old": self.miou_old,
            "miou_new": self.miou_new,
            "miou_all": self.miou_all,
        }


def _nanmean(values: np.ndarray) -> float | None:
    finite = values[~np.isnan(values)]
    if finite.size == 0:
        return None
    return float(finite.mean())


def metrics_from_confusion(cm: np.ndarray, schedule: TaskSchedule, t: int) -> StepMetrics:
    """old = background plus initial-step classes; new = classes of steps 2..t;
    all = background plus every class learned so far (unweighted means)."""
    iou = iou_from_confusion(cm)
    learned = [0] + list(schedule.classes_through(t))
    old_ids = [0] + list(schedule.classes_for(1))
    new_ids = [c for c in schedule.classes_through(t) if c not in schedule.classes_for(1)]

    per_class = {c: (None if np.isnan(iou[c]) else float(iou[c])) for c in learned}
    miou_old = _nanmean(iou[old_ids])
    miou_new = _nanmean(iou[new_ids]) if new_ids else None
    miou_all = _nanmean(iou[learned])
    return StepMetrics(
        step=t, per_class_iou=per_class,
        miou_old=miou_old if miou_old is not None else float("nan"),
        miou_new=miou_new,
        miou_all=miou_all if miou_all is not None else float("nan"),
    )


def evaluate(model: SegNet, eval_scenes: Sequence[Scene], schedule: TaskSchedule,
             t: int, batch_size: int = 16) -> StepMetrics:
    """Full-resolution IoU over complete ground truth, with classes from
    future steps masked to background."""
    learned = set(schedule.classes_through(t))
    num_classes = schedule.num_classes + 1
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(eval_scenes), batch_size):
                chunk = eval_scenes[start:start + batch_size]
                images = torch.from_numpy(
                    np.stack([s.image for s in chunk]).transpose(0, 3, 1, 2)
                )
                _, logits = model(images)
                pred = predict(logits, model.class_ids)
                pred_full = upsample_labels(pred).numpy()
                gt = np.stack([s.label for s in chunk])
                gt = np.where(np.isin(gt, list(learned)), gt, 0)
                cm += confusion_matrix(pred_full, gt, num_classes)
    finally:
        model.train(was_training)

    return metrics_from_confusion(cm, schedule, t)
