"""Training-free prototype drift estimation and compensation.

During an incremental step the extractor's embedding of old classes moves.
This pipeline estimates that displacement from old-class pixels that both the
previous and current model confidently agree on (unified masks), then shifts
each stored prototype by the estimated displacement, weighted by how much
evidence this step actually produced relative to the class's lifetime pixel
count.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch

from .model import ModelSnapshot, SegNet, downsample_labels
from .prototypes import PrototypeStore
from .uncertainty import certainty_scores, filtered_prediction


def unified_masks(filtered_cur: torch.Tensor, filtered_prev: torch.Tensor) -> torch.Tensor:
    """Keep a class only where both confidence-filtered maps agree and are
    nonzero; everything else is 0."""
    agree = (filtered_cur == filtered_prev) & (filtered_cur != 0)
    return torch.where(agree, filtered_cur, torch.zeros_like(filtered_cur))


def subprototype(features: Sequence[np.ndarray], masks: Sequence[np.ndarray],
                 class_id: int) -> np.ndarray | None:
    """Aggregate masked features over a pool and normalize the aggregate.

    features: per-image (h, w, d) arrays; masks: per-image (h, w) label maps.
    Returns a unit d-vector, or None when no pixel matched (or the aggregate
    has zero norm).
    """
    total = None
    for feat, mask in zip(features, masks):
        sel = feat[mask == class_id]
        if sel.size == 0:
            continue
        s = sel.sum(axis=0, dtype=np.float64)
        total = s if total is None else total + s
    if total is None:
        return None
    norm = np.linalg.norm(total)
    if norm == 0.0:
        return None
    return total / norm


def deviation(subproto_prev: np.ndarray, subproto_cur: np.ndarray) -> np.ndarray:
    """Displacement of the class direction between the two extractors."""
    return subproto_cur - subproto_prev


def adaptive_weight(observed_pixels: int, eta: int) -> float:
    """rho = n / (eta + n): how much this step's evidence outweighs history."""
    if observed_pixels == 0:
        return 0.0
    return observed_pixels / (eta + observed_pixels)


def compensate(stored: np.ndarray, delta: np.ndarray, rho: float) -> np.ndarray:
    """Blend the shifted prototype (stored + delta) with the stored one."""
    shifted = stored + delta
    return rho * shifted + (1.0 - rho) * stored


@dataclass
class ClassCompensation:
    """Drift-compensation outcome for one old class."""

    class_id: int
    subproto_prev: np.ndarray | None
    subproto_cur: np.ndarray | None
    delta: np.ndarray | None
    rho: float
    compensated: np.ndarray        # raw blend, pre-renormalization
    compensated_unit: np.ndarray   # renormalized direction used downstream
    observed_pixels: int

    def to_json_dict(self) -> dict:
        return {
            "class_id": self.class_id,
            "rho": self.rho,
            "observed_pixels": self.observed_pixels,
            "delta_norm": float(np.linalg.norm(self.delta)) if self.delta is not None else None,
        }


@dataclass
class CompensationReport:
    """Per-class outcomes of one compensation pass."""

    step: int
    epoch: int | None
    per_class: dict[int, ClassCompensation]

    def to_json_dict(self) -> dict:
        return {
            "step": self.step,
            "epoch": self.epoch,
            "classes": {str(c): cc.to_json_dict() for c, cc in sorted(self.per_class.items())},
        }


def run_adc(prev: ModelSnapshot, model: SegNet, pool, store: PrototypeStore,
            tau: float, batch_size: int = 16, epoch: int | None = None,
            renormalize: bool = True) -> CompensationReport:
    """Full compensation pass over a step pool.  Training-free: both models run
    in eval mode under no_grad and no parameter is touched.

    pool: sequence of StepSample (images plus step-visible labels).
    """
    old_classes = store.classes()
    out: dict[int, ClassCompensation] = {}
    d = model.cfg.feature_dim

    sums_prev = {c: np.zeros(d) for c in old_classes}
    sums_cur = {c: np.zeros(d) for c in old_classes}
    counts = {c: 0 for c in old_classes}

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for start in range(0, len(pool), batch_size):
                chunk = pool[start:start + batch_size]
                images = torch.from_numpy(
                    np.stack([s.image for s in chunk]).transpose(0, 3, 1, 2)
                )
                labels = torch.from_numpy(np.stack([s.label for s in chunk]))
                labels_ds = downsample_labels(labels)

                feats_cur, logits_cur = model(images)
                feats_prev, logits_prev = prev.forward(images)

                phi_cur = certainty_scores(logits_cur).phi
                phi_prev = certainty_scores(logits_prev).phi
                bar_cur = filtered_prediction(
                    logits_cur, phi_cur, labels_ds, tau, old_classes, model.class_ids
                )
                bar_prev = filtered_prediction(
                    logits_prev, phi_prev, labels_ds, tau, old_classes, prev.class_ids
                )
                unified = unified_masks(bar_cur, bar_prev).numpy()

                fc = feats_cur.numpy().astype(np.float64).transpose(0, 2, 3, 1)
                fp = feats_prev.numpy().astype(np.float64).transpose(0, 2, 3, 1)
                for c in old_classes:
                    mask = unified == c
                    n = int(mask.sum())
                    if n == 0:
                        continue
                    counts[c] += n
                    sums_prev[c] += fp[mask].sum(axis=0)
                    sums_cur[c] += fc[mask].sum(axis=0)
    finally:
        model.train(was_training)

    for c in old_classes:
        rec = store.get(c)
        stored = rec.proto
        n = counts[c]
        norm_prev = np.linalg.norm(sums_prev[c])
        norm_cur = np.linalg.norm(sums_cur[c])
        if n == 0 or norm_prev == 0.0 or norm_cur == 0.0:
            out[c] = ClassCompensation(
                class_id=c, subproto_prev=None, subproto_cur=None, delta=None,
                rho=0.0, compensated=stored.copy(), compensated_unit=stored.copy(),
                observed_pixels=n,
            )
            continue
        sp_prev = sums_prev[c] / norm_prev
        sp_cur = sums_cur[c] / norm_cur
        delta = deviation(sp_prev, sp_cur)
        rho = adaptive_weight(n, rec.eta)
        comp = compensate(stored, delta, rho)
        comp_norm = np.linalg.norm(comp)
        unit = comp / comp_norm if (renormalize and comp_norm > 0) else comp.copy()
        out[c] = ClassCompensation(
            class_id=c, subproto_prev=sp_prev, subproto_cur=sp_cur, delta=delta,
            rho=rho, compensated=comp, compensated_unit=unit, observed_pixels=n,
        )

    return CompensationReport(step=prev.step + 1, epoch=epoch, per_class=out)
