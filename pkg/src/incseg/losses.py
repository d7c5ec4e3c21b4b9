"""The four training objectives and their weighted combination.

Every loss is a pure function of torch tensors, differentiable where training
needs gradients, and dtype-agnostic so the same code paths serve float32
training and float64 verification.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import torch
import torch.nn.functional as F

from .errors import ConfigError, ContractError
from .uncertainty import certainty_scores, uncertainty_mask


def _as_batched(logits: torch.Tensor) -> torch.Tensor:
    return logits if logits.dim() == 4 else logits.unsqueeze(0)


def mbce_loss(logits: torch.Tensor, target: torch.Tensor,
              class_ids: Sequence[int],
              replay_features: torch.Tensor | None = None,
              replay_weights: torch.Tensor | None = None,
              replay_bias: torch.Tensor | None = None,
              replay_targets: torch.Tensor | None = None) -> torch.Tensor:
    """Per-class binary cross-entropy over one-hot targets, plus replay terms.

    Scorer c is pushed toward 1 where the label equals c and toward 0 where
    the label names another known class; background (label 0) is a positive
    for the background scorer.  Replay features, when given, are scored by the
    provided (J,d) scorer stack against replay_targets ((J,) or (M,J)).  The
    reduction is a single mean over all position terms plus all replay terms.
    """
    logits = _as_batched(logits)
    target = target if target.dim() == 3 else target.unsqueeze(0)
    ids = torch.as_tensor(list(class_ids), dtype=target.dtype, device=target.device)
    if not torch.isin(target, ids).all():
        raise ContractError("target label map contains values outside known classes")
    onehot = (target.unsqueeze(1) == ids.view(1, -1, 1, 1)).to(logits.dtype)
    total = F.binary_cross_entropy_with_logits(logits, onehot, reduction="sum")
    count = logits.numel()
    if replay_features is not None:
        scores = replay_features @ replay_weights.T + replay_bias
        rt = replay_targets.to(scores.dtype).expand_as(scores)
        total = total + F.binary_cross_entropy_with_logits(scores, rt, reduction="sum")
        count += scores.numel()
    return total / count


def kd_loss(cur_logits_old: torch.Tensor, prev_logits: torch.Tensor) -> torch.Tensor:
    """MSE between sigmoid scores of the shared (old) channels of the current
    model and the frozen previous model."""
    if cur_logits_old.shape != prev_logits.shape:
        raise ContractError(
            f"kd channel mismatch: {tuple(cur_logits_old.shape)} vs "
            f"{tuple(prev_logits.shape)}"
        )
    return ((torch.sigmoid(cur_logits_old) - torch.sigmoid(prev_logits)) ** 2).mean()


def uac_loss(logits: torch.Tensor, gt_label: torch.Tensor, pred: torch.Tensor,
             tau: float, new_classes: Sequence[int]) -> torch.Tensor:
    """Push masked prediction uncertainty toward zero.

    u is the complement of the top-2 sigmoid gap; the mask clears positions
    that are already confident or correctly predicted as a new class.  The
    loss is the mean over positions of the squared masked uncertainty.
    """
    cm = certainty_scores(logits)
    sigmoid_max = torch.sigmoid(logits).amax(dim=-3)
    mask = uncertainty_mask(gt_label, pred, sigmoid_max.detach(), tau, new_classes)
    return ((cm.u * mask) ** 2).mean()


def _aggregate_centers(features: torch.Tensor, select: torch.Tensor) -> torch.Tensor | None:
    """Sum features over selected positions, normalized by the aggregate norm."""
    if not select.any():
        return None
    feats = features if features.dim() == 4 else features.unsqueeze(0)
    flat = feats.permute(0, 2, 3, 1).reshape(-1, feats.shape[1])
    total = flat[select.reshape(-1)].sum(dim=0)
    norm = torch.linalg.vector_norm(total)
    if norm.item() == 0.0:
        return None
    return total / norm


def batch_centers(features: torch.Tensor, labels: torch.Tensor,
                  class_set: Sequence[int]) -> dict[int, torch.Tensor]:
    """Per-class aggregate-normalized feature centers over a whole batch.
    Classes with no pixels are absent.  Differentiable w.r.t. features."""
    labels = labels if labels.dim() == 3 else labels.unsqueeze(0)
    out: dict[int, torch.Tensor] = {}
    for c in class_set:
        center = _aggregate_centers(features, labels == c)
        if center is not None:
            out[c] = center
    return out


def misclassified_centers(features: torch.Tensor, labels: torch.Tensor,
                          preds: torch.Tensor,
                          class_set: Sequence[int]) -> dict[int, torch.Tensor]:
    """Centers of positions predicted as class c whose label is not c."""
    labels = labels if labels.dim() == 3 else labels.unsqueeze(0)
    preds = preds if preds.dim() == 3 else preds.unsqueeze(0)
    out: dict[int, torch.Tensor] = {}
    for c in class_set:
        center = _aggregate_centers(features, (labels != c) & (preds == c))
        if center is not None:
            out[c] = center
    return out


def cpd_loss(centers: Mapping[int, torch.Tensor],
             mis_centers: Mapping[int, torch.Tensor],
             old_protos: Mapping[int, torch.Tensor],
             epsilon: float,
             class_count: int | None = None,
             like: torch.Tensor | None = None) -> torch.Tensor:
    """Inverse-distance repulsion between new-class centers, stored old-class
    directions, and misclassified-pixel centers.

    Old prototypes are constants; gradients reach the centers only.  Each term
    averages over the classes that contribute to it, or over `class_count`
    when a fixed denominator is requested.  Empty inputs contribute 0.
    """
    if epsilon <= 0:
        raise ConfigError("epsilon must be > 0")
    ref = like if like is not None else next(iter(centers.values()), None)
    if ref is None:
        ref = next(iter(mis_centers.values()), None)
    zero = (ref.new_zeros(()) if ref is not None
            else torch.zeros((), dtype=torch.get_default_dtype()))

    term_old = zero
    n_old = 0
    if old_protos:
        proto_stack = torch.stack([
            torch.as_tensor(p, dtype=zero.dtype).detach() for _, p in sorted(old_protos.items())
        ])
        acc = zero
        for _, center in sorted(centers.items()):
            dists = torch.linalg.vector_norm(center.unsqueeze(0) - proto_stack, dim=1)
            acc = acc + 1.0 / (dists.min() + epsilon)
            n_old += 1
        if n_old:
            term_old = acc / (class_count if class_count else n_old)

    term_mis = zero
    n_mis = 0
    acc = zero
    for c, center in sorted(centers.items()):
        if c not in mis_centers:
            continue
        dist = torch.linalg.vector_norm(center - mis_centers[c])
        acc = acc + 1.0 / (dist + epsilon)
        n_mis += 1
    if n_mis:
        term_mis = acc / (class_count if class_count else n_mis)

    return term_old + term_mis


def weighted_total(mbce, kd, uac, cpd, alpha: float, beta: float, gamma: float):
    """Combine the four terms; works identically on tensors and floats."""
    if alpha < 0 or beta < 0 or gamma < 0:
        raise ConfigError("loss weights must be >= 0")
    return mbce + alpha * kd + beta * uac + gamma * cpd


@dataclass(frozen=True)
class LossBundle:
    """One training iteration's loss terms and their weighted total."""

    mbce: float
    kd: float
    uac: float
    cpd: float
    alpha: float
    beta: float
    gamma: float
    total: float

    @classmethod
    def from_terms(cls, mbce: float, kd: float, uac: float, cpd: float,
                   alpha: float, beta: float, gamma: float) -> "LossBundle":
        return cls(
            mbce=mbce, kd=kd, uac=uac, cpd=cpd,
            alpha=alpha, beta=beta, gamma=gamma,
            total=weighted_total(mbce, kd, uac, cpd, alpha, beta, gamma),
        )

    def to_json_dict(self) -> dict:
        return {
            "mbce": self.mbce, "kd": self.kd, "uac": self.uac, "cpd": self.cpd,
            "total": self.total,
        }
