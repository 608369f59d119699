"""Target expansion and the detection training / distillation losses."""
from __future__ import annotations

import math
from typing import Tuple

import numpy as np

from ..engine import Tensor
from ..engine import functional as F
from ..errors import ContractError, DomainError, ShapeError
from .preprocess import DetectionTarget


def expand_targets(target: DetectionTarget, num_queries: int, num_classes: int
                   ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Assign objects to queries round-robin in annotation order.

    Query q gets object q mod G while q < G * ceil(Q / G); other queries get
    an all-zero class row, a zero box and ``mask = False``. With G = 0 every
    query is background.
    """
    if num_queries < 1:
        raise ContractError("need at least one query")
    g = len(target)
    labels = np.zeros((num_queries, num_classes))
    boxes = np.zeros((num_queries, 4))
    mask = np.zeros(num_queries, dtype=bool)
    if g == 0:
        return labels, boxes, mask
    if target.labels.min() < 0 or target.labels.max() >= num_classes:
        raise DomainError(f"target labels must lie in [0, {num_classes})")
    filled = min(num_queries, g * math.ceil(num_queries / g))
    obj = np.arange(filled) % g
    labels[np.arange(filled), target.labels[obj]] = 1.0
    boxes[:filled] = target.boxes[obj]
    mask[:filled] = True
    return labels, boxes, mask


def expand_batch(targets, num_queries: int, num_classes: int):
    parts = [expand_targets(t, num_queries, num_classes) for t in targets]
    return tuple(np.stack(p) for p in zip(*parts))


def detection_classification_loss(student_logits, expanded_labels) -> Tensor:
    """Mean binary cross-entropy over every (query, class) entry."""
    logits = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    y = np.asarray(expanded_labels, dtype=np.float64)
    if logits.shape != y.shape:
        raise ShapeError(f"logits {logits.shape} vs targets {y.shape}")
    return F.bce_with_logits(logits, y)


def bbox_loss(pred_boxes, expanded_boxes, mask) -> Tensor:
    """Smooth-L1 averaged over the coordinates of masked-in queries; 0 if none."""
    pred = pred_boxes if isinstance(pred_boxes, Tensor) else Tensor(pred_boxes)
    target = np.asarray(expanded_boxes, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if pred.shape != target.shape or m.shape != pred.shape[:-1]:
        raise ShapeError(f"boxes {pred.shape}, targets {target.shape}, mask {m.shape}")
    count = int(m.sum()) * pred.shape[-1]
    if count == 0:
        return F.mul(F.sum(pred), 0.0)
    weight = np.broadcast_to(m[..., None], pred.shape).astype(np.float64)
    return F.div(F.sum(F.mul(F.smooth_l1(F.sub(pred, target)), weight)), float(count))


def detection_distill_loss(student_logits, teacher_logits, temperature: float) -> Tensor:
    """Per-query KL(teacher || student) of temperature-softened class distributions, averaged over queries."""
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student logits {s.shape} vs teacher logits {t.shape}")
    scaled = t / temperature
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    log_q = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    q = np.exp(log_q)
    log_p = F.log_softmax_t(s, temperature, axis=-1)
    return F.mean(F.sum(F.mul(q, F.sub(log_q, log_p)), axis=-1))
