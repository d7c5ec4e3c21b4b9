"""Independent reference implementations used to verify the package.

Everything here is written as plain per-pixel / per-element Python loops over
numpy arrays, deliberately avoiding the package's own vectorized code paths.
"""

from __future__ import annotations

import math

import numpy as np


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def bce_with_logits(logit: float, target: float) -> float:
    # Numerically stable form, same as torch's.
    return max(logit, 0.0) - logit * target + math.log1p(math.exp(-abs(logit)))


def oracle_predict(logits: np.ndarray, class_ids) -> np.ndarray:
    """Per-pixel argmax loop; ties go to the lowest channel index."""
    K, h, w = logits.shape
    out = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            best = 0
            for k in range(1, K):
                if logits[k, i, j] > logits[best, i, j]:
                    best = k
            out[i, j] = class_ids[best]
    return out


def oracle_certainty(logits: np.ndarray) -> np.ndarray:
    """phi per pixel via full sort of all sigmoid scores."""
    K, h, w = logits.shape
    phi = np.zeros((h, w))
    for i in range(h):
        for j in range(w):
            scores = sorted((sigmoid(float(logits[k, i, j])) for k in range(K)),
                            reverse=True)
            phi[i, j] = scores[0] - scores[1]
    return phi


def oracle_filtered_prediction(logits, gt, tau, allowed, class_ids):
    phi = oracle_certainty(logits)
    pred = oracle_predict(logits, class_ids)
    h, w = gt.shape
    out = np.zeros((h, w), dtype=np.int64)
    for i in range(h):
        for j in range(w):
            if gt[i, j] == 0 and phi[i, j] >= tau and pred[i, j] in allowed:
                out[i, j] = pred[i, j]
    return out


def oracle_pseudo_label(label, prev_logits, tau, old_classes, class_ids):
    phi = oracle_certainty(prev_logits)
    pred = oracle_predict(prev_logits, class_ids)
    out = label.copy()
    h, w = label.shape
    for i in range(h):
        for j in range(w):
            if label[i, j] == 0 and phi[i, j] >= tau and pred[i, j] in old_classes:
                out[i, j] = pred[i, j]
    return out


def oracle_unified(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = np.zeros_like(a)
    h, w = a.shape
    for i in range(h):
        for j in range(w):
            if a[i, j] == b[i, j] and a[i, j] != 0:
                out[i, j] = a[i, j]
    return out


def oracle_center(features, masks, class_id):
    """Aggregate-then-normalize center over (h,w,d) feature maps and (h,w)
    label maps; None when no pixel matches or the aggregate is zero."""
    total = None
    for feat, mask in zip(features, masks):
        h, w = mask.shape
        for i in range(h):
            for j in range(w):
                if mask[i, j] == class_id:
                    v = feat[i, j].astype(np.float64)
                    total = v.copy() if total is None else total + v
    if total is None:
        return None
    norm = math.sqrt(float((total**2).sum()))
    if norm == 0.0:
        return None
    return total / norm


def oracle_misclassified_center(features, labels, preds, class_id):
    total = None
    for feat, lab, pred in zip(features, labels, preds):
        h, w = lab.shape
        for i in range(h):
            for j in range(w):
                if lab[i, j] != class_id and pred[i, j] == class_id:
                    v = feat[i, j].astype(np.float64)
                    total = v.copy() if total is None else total + v
    if total is None:
        return None
    norm = math.sqrt(float((total**2).sum()))
    if norm == 0.0:
        return None
    return total / norm


def oracle_mbce(logits, target, class_ids, replay_features=None,
                replay_weights=None, replay_bias=None, replay_targets=None):
    """Elementwise BCE loop over (position, class) terms plus replay terms."""
    K, h, w = logits.shape
    total = 0.0
    count = 0
    for k in range(K):
        cid = class_ids[k]
        for i in range(h):
            for j in range(w):
                y = 1.0 if target[i, j] == cid else 0.0
                total += bce_with_logits(float(logits[k, i, j]), y)
                count += 1
    if replay_features is not None:
        M = replay_features.shape[0]
        J = replay_weights.shape[0]
        rt = np.broadcast_to(np.asarray(replay_targets, dtype=np.float64), (M, J))
        for m in range(M):
            for j in range(J):
                score = float(replay_features[m] @ replay_weights[j] + replay_bias[j])
                total += bce_with_logits(score, float(rt[m, j]))
                count += 1
    return total / count


def oracle_kd(cur, prev):
    C, h, w = cur.shape
    total = 0.0
    for c in range(C):
        for i in range(h):
            for j in range(w):
                diff = sigmoid(float(cur[c, i, j])) - sigmoid(float(prev[c, i, j]))
                total += diff * diff
    return total / (C * h * w)


def oracle_uac(logits, gt, tau, new_classes, class_ids):
    K, h, w = logits.shape
    pred = oracle_predict(logits, class_ids)
    phi = oracle_certainty(logits)
    total = 0.0
    for i in range(h):
        for j in range(w):
            smax = max(sigmoid(float(logits[k, i, j])) for k in range(K))
            correct_new = gt[i, j] == pred[i, j] and gt[i, j] in new_classes
            m = 0.0 if (correct_new or smax >= tau) else 1.0
            u = 1.0 - phi[i, j]
            total += (u * m) ** 2
    return total / (h * w)


def oracle_cpd(centers, mis_centers, protos, epsilon, class_count=None):
    """centers/mis_centers/protos: dict class -> (d,) numpy vectors."""
    def dist(a, b):
        return math.sqrt(float(((a - b) ** 2).sum()))

    term_old = 0.0
    n_old = 0
    if protos:
        for c in sorted(centers):
            dmin = min(dist(centers[c], p) for p in protos.values())
            term_old += 1.0 / (dmin + epsilon)
            n_old += 1
        if n_old:
            term_old /= class_count if class_count else n_old
    term_mis = 0.0
    n_mis = 0
    for c in sorted(centers):
        if c in mis_centers:
            term_mis += 1.0 / (dist(centers[c], mis_centers[c]) + epsilon)
            n_mis += 1
    if n_mis:
        term_mis /= class_count if class_count else n_mis
    return term_old + term_mis


def oracle_confusion(pred, gt, num_classes):
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    h, w = gt.shape
    for i in range(h):
        for j in range(w):
            cm[gt[i, j], pred[i, j]] += 1
    return cm


def oracle_iou(cm):
    n = cm.shape[0]
    out = np.full(n, np.nan)
    for c in range(n):
        inter = cm[c, c]
        union = cm[c, :].sum() + cm[:, c].sum() - cm[c, c]
        if union > 0:
            out[c] = inter / union
    return out


def oracle_upsample(label, factor):
    h, w = label.shape
    out = np.zeros((h * factor, w * factor), dtype=label.dtype)
    for i in range(h * factor):
        for j in range(w * factor):
            out[i, j] = label[i // factor, j // factor]
    return out


# ---------------------------------------------------------------------------
# Finite differences

def fd_grad(func, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of a scalar function of a float64 array."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = func(x)
        flat[i] = orig - h
        fm = func(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray,
                floor: float = 1e-3) -> float:
    """Max elementwise relative error with an absolute floor for vanishing
    gradients (central differences cannot resolve below ~1e-10)."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0
