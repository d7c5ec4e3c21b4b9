"""Certainty scoring, confidence filtering, and pseudo-labeling.

All maps live at feature resolution.  Logits carry their channel axis at
dim -3, so every operation works on single maps (K,h,w) and batches (B,K,h,w)
alike.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ContractError
from .model import predict


@dataclass(frozen=True)
class CertaintyMap:
    """Top-2 sigmoid-score gap per position (phi) and its complement (u)."""

    phi: torch.Tensor
    u: torch.Tensor


def certainty_scores(logits: torch.Tensor) -> CertaintyMap:
    """phi = sigmoid(top-1 logit) - sigmoid(top-2 logit), in [0, 1].

    Differentiable w.r.t. logits; gradients flow into the two selected
    channels only.
    """
    if logits.shape[-3] < 2:
        raise ContractError("certainty_scores needs at least 2 channels")
    top2 = torch.topk(logits, 2, dim=-3).values
    phi = torch.sigmoid(top2.select(-3, 0)) - torch.sigmoid(top2.select(-3, 1))
    return CertaintyMap(phi=phi, u=1.0 - phi)


def _isin(values: torch.Tensor, allowed: Sequence[int]) -> torch.Tensor:
    if len(allowed) == 0:
        return torch.zeros_like(values, dtype=torch.bool)
    allowed_t = torch.as_tensor(list(allowed), dtype=values.dtype, device=values.device)
    return torch.isin(values, allowed_t)


def filtered_prediction(logits: torch.Tensor, phi: torch.Tensor,
                        gt_label: torch.Tensor, tau: float,
                        allowed_classes: Sequence[int],
                        class_ids: Sequence[int] | None = None) -> torch.Tensor:
    """High-confidence old-class predictions on ground-truth background.

    A position keeps its predicted class iff the ground truth is background,
    phi >= tau, and the prediction falls in allowed_classes; otherwise 0.
    """
    pred = predict(logits, class_ids)
    keep = (gt_label == 0) & (phi >= tau) & _isin(pred, allowed_classes)
    return torch.where(keep, pred, torch.zeros_like(pred))


def uncertainty_mask(gt_label: torch.Tensor, pred: torch.Tensor,
                     sigmoid_max: torch.Tensor, tau: float,
                     new_classes: Sequence[int]) -> torch.Tensor:
    """Binary mask selecting positions whose uncertainty should be penalized.

    Cleared (0) where the prediction already agrees with a new-class ground
    truth, or where the max per-class sigmoid is confident (>= tau); 1
    elsewhere.
    """
    agree_new = (gt_label == pred) & _isin(gt_label, new_classes)
    confident = sigmoid_max >= tau
    return (~(agree_new | confident)).to(sigmoid_max.dtype)


def pseudo_label(step_label: torch.Tensor, prev_logits: torch.Tensor | None,
                 tau: float, old_classes: Sequence[int],
                 class_ids: Sequence[int] | None = None) -> torch.Tensor:
    """Fill background positions with confident old-class predictions from the
    previous model.  Identity when no previous model exists (step 1).

    Never overwrites a nonzero ground-truth label.
    """
    if prev_logits is None:
        return step_label
    cm = certainty_scores(prev_logits)
    pred = predict(prev_logits, class_ids)
    fill = (step_label == 0) & (cm.phi >= tau) & _isin(pred, old_classes)
    return torch.where(fill, pred, step_label)
