"""Supervised teacher training, teacher -> student distillation and mAP evaluation for DetrLite."""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from ..boxes import cxcywh_to_xyxy, nms
from ..engine import AdamW, Rng, Tensor, no_grad
from ..engine import functional as F
from ..errors import ConfigError
from ..metrics import ImageDetections, MapResult, mean_average_precision
from .losses import bbox_loss, detection_classification_loss, detection_distill_loss, expand_batch
from .model import DetrLite
from .preprocess import DetectionTarget, preprocess_detection


@dataclass
class DetectionTrainConfig:
    epochs: int = 60
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    cosine: bool = True
    lambda_cls: float = 1.0
    lambda_box: float = 5.0
    lambda_distill: float = 1.0
    temperature: float = 2.0
    grad_clip: float = 1.0
    score_threshold: float = 0.05
    nms_iou: float = 0.5
    map_every: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        if min(self.lambda_cls, self.lambda_box, self.lambda_distill) < 0:
            raise ConfigError("loss weights must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def prepare_detection(dataset, shortest: int = 64, longest: int = 96, indices: Optional[Sequence[int]] = None
                      ) -> Tuple[np.ndarray, List[DetectionTarget]]:
    """Preprocess every scene of a DetectionDataset into stacked pixels and targets."""
    indices = range(len(dataset.images)) if indices is None else indices
    pixels, targets = [], []
    for i in indices:
        labels, boxes = dataset.targets(i)
        px, target = preprocess_detection(dataset.images[i], labels, boxes, shortest, longest)
        pixels.append(px)
        targets.append(target)
    shapes = {p.shape for p in pixels}
    if len(shapes) > 1:
        raise ConfigError(f"scenes preprocess to different sizes {sorted(shapes)}; batching needs one size")
    return np.stack(pixels), targets


def _clip_gradients(params, max_norm: float) -> None:
    if max_norm <= 0:
        return
    total = math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


def _supervised_terms(out, targets, model_config):
    labels, boxes, mask = expand_batch(targets, model_config.num_queries, model_config.num_classes)
    return detection_classification_loss(out.class_logits, labels), bbox_loss(out.pred_boxes, boxes, mask)


def _run(student: DetrLite, pixels, targets, config: DetectionTrainConfig, rng: Rng, teacher_logits=None,
         eval_fn=None, log=None) -> List[dict]:
    params = student.parameters()
    opt = AdamW(params, config.lr, weight_decay=config.weight_decay)
    history = []
    n = len(pixels)
    for epoch in range(config.epochs):
        if config.cosine:
            opt.state.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        student.train()
        order = rng.child(epoch).permutation(n)
        sums = {"cls": 0.0, "bbox": 0.0, "distill": 0.0, "total": 0.0}
        steps = 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            out = student.forward(pixels[idx])
            cls, box = _supervised_terms(out, [targets[i] for i in idx], student.config)
            total = F.add(F.mul(cls, config.lambda_cls), F.mul(box, config.lambda_box))
            dist_value = 0.0
            if teacher_logits is not None and config.lambda_distill > 0:
                dist = detection_distill_loss(out.class_logits, teacher_logits[idx], config.temperature)
                total = F.add(total, F.mul(dist, config.lambda_distill))
                dist_value = dist.item()
            opt.zero_grad()
            total.backward()
            _clip_gradients(params, config.grad_clip)
            opt.step()
            for k, v in (("cls", cls.item()), ("bbox", box.item()), ("distill", dist_value), ("total", total.item())):
                sums[k] += v
            steps += 1
        record = {"epoch": epoch + 1, **{k: v / steps for k, v in sums.items()}, "map": float("nan")}
        last = epoch == config.epochs - 1
        if eval_fn is not None and config.map_every > 0 and ((epoch + 1) % config.map_every == 0 or last):
            record["map"] = float(eval_fn(student))
        history.append(record)
        if log:
            log(record)
    return history


def train_detr_teacher(model: DetrLite, pixels: np.ndarray, targets: Sequence[DetectionTarget],
                       config: DetectionTrainConfig, rng: Rng, eval_fn=None,
                       log: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Supervised training on expanded targets (classification + box terms only)."""
    return _run(model, pixels, targets, config, rng, None, eval_fn, log)


def distill_detection(teacher: DetrLite, student: DetrLite, pixels: np.ndarray,
                      targets: Sequence[DetectionTarget], config: DetectionTrainConfig, rng: Rng,
                      eval_fn=None, log: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Train ``student`` on expanded targets plus per-query softened teacher logits.

    The teacher is frozen; its logits for every image are computed once up front.
    """
    tc, sc = teacher.config, student.config
    if (tc.num_classes, tc.num_queries) != (sc.num_classes, sc.num_queries):
        raise ConfigError(f"teacher has {tc.num_classes} classes / {tc.num_queries} queries, "
                          f"student has {sc.num_classes} / {sc.num_queries}")
    teacher.requires_grad_(False)
    teacher_logits, _ = teacher.predict(pixels)
    return _run(student, pixels, targets, config, rng, teacher_logits, eval_fn, log)


def decode(class_logits: np.ndarray, pred_boxes: np.ndarray, score_threshold: float = 0.05,
           nms_iou: float = 0.5) -> Tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Per-image detections from one (Q, C) / (Q, 4) output.

    Each query votes for its highest-sigmoid class; duplicates produced by
    replicated targets are merged with per-class NMS. Returns
    ``(query_ids, classes, scores, boxes_xyxy)`` with boxes in [0, 1] units.
    """
    probs = 1.0 / (1.0 + np.exp(-np.asarray(class_logits, dtype=np.float64)))
    classes = probs.argmax(axis=1)
    scores = probs[np.arange(len(probs)), classes]
    boxes = cxcywh_to_xyxy(np.asarray(pred_boxes, dtype=np.float64))
    keep_q = []
    for c in np.unique(classes):
        q = np.flatnonzero((classes == c) & (scores >= score_threshold))
        if len(q):
            keep_q.extend(q[nms(boxes[q], scores[q], nms_iou)].tolist())
    keep = np.array(sorted(keep_q, key=lambda i: (-scores[i], i)), dtype=np.int64)
    return keep, classes[keep], scores[keep], boxes[keep]


def detections(model: DetrLite, pixels: np.ndarray, config: Optional[DetectionTrainConfig] = None):
    config = config or DetectionTrainConfig()
    logits, boxes = model.predict(pixels)
    return [decode(l, b, config.score_threshold, config.nms_iou) for l, b in zip(logits, boxes)]


def evaluate_map(model: DetrLite, pixels: np.ndarray, targets: Sequence[DetectionTarget],
                 config: Optional[DetectionTrainConfig] = None, iou_threshold: float = 0.5) -> MapResult:
    results = []
    for (_, classes, scores, boxes), target in zip(detections(model, pixels, config), targets):
        results.append(ImageDetections.make(classes, scores, boxes, target.labels,
                                            cxcywh_to_xyxy(target.boxes)))
    return mean_average_precision(results, iou_threshold, model.config.num_classes)


def write_detections_csv(path, image_ids: Sequence[int], dets, width: float, height: float) -> None:
    """Rows of (image_id, query, class, score, x, y, w, h) in absolute pixels."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["image_id", "query", "class", "score", "x", "y", "w", "h"])
        for image_id, (queries, classes, scores, boxes) in zip(image_ids, dets):
            for q, c, s, b in zip(queries, classes, scores, boxes):
                x1, y1, x2, y2 = b[0] * width, b[1] * height, b[2] * width, b[3] * height
                w.writerow([int(image_id), int(q), int(c), repr(float(s)),
                            repr(float(x1)), repr(float(y1)), repr(float(x2 - x1)), repr(float(y2 - y1))])


PALETTE = np.array([[255, 255, 0], [0, 255, 255], [255, 0, 255], [255, 255, 255]], dtype=np.uint8)


def draw_boxes(image: np.ndarray, boxes_xyxy: np.ndarray, classes: Sequence[int]) -> np.ndarray:
    """Copy of an (H, W, 3) uint8 image with 1-pixel box outlines in absolute coordinates."""
    out = np.array(image, dtype=np.uint8, copy=True)
    h, w = out.shape[:2]
    for box, c in zip(np.asarray(boxes_xyxy).reshape(-1, 4), classes):
        x1, y1 = int(np.clip(np.floor(box[0]), 0, w - 1)), int(np.clip(np.floor(box[1]), 0, h - 1))
        x2, y2 = int(np.clip(np.ceil(box[2]) - 1, 0, w - 1)), int(np.clip(np.ceil(box[3]) - 1, 0, h - 1))
        color = PALETTE[int(c) % len(PALETTE)]
        out[y1, x1:x2 + 1] = color
        out[y2, x1:x2 + 1] = color
        out[y1:y2 + 1, x1] = color
        out[y1:y2 + 1, x2] = color
    return out


def cross_attention_probe(output, layer: int = -1) -> np.ndarray:
    """Head-averaged cross-attention row of each image's top-scoring query, shape (B, H*W)."""
    att = output.cross_attention[layer]
    att = att.data if isinstance(att, Tensor) else np.asarray(att)
    logits = output.class_logits.data if isinstance(output.class_logits, Tensor) else np.asarray(output.class_logits)
    top = logits.max(axis=-1).argmax(axis=-1)
    return att.mean(axis=1)[np.arange(att.shape[0]), top]
