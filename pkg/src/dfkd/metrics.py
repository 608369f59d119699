"""Evaluation: Frechet distance on Gaussian feature fits, accuracy, detection mAP.

The FID feature space is a small convolutional classifier trained once on the
real desk dataset, so absolute FID values only compare across runs that share
the same extractor checkpoint.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .boxes import iou_matrix
from .engine import Rng, Tensor, no_grad
from .engine import functional as F
from .engine.nn import Conv2d, Linear, Module
from .errors import ConfigError, ContractError, ShapeError

# Published reference FIDs as (vanilla, augmented); metadata only, never asserted.
REFERENCE_FID = {"MNIST": (27.0, 23.0), "CIFAR-10": (76.94, 70.37), "CIFAR-100": (83.27, 77.16)}

SYMMETRY_TOL = 1e-10


@dataclass
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @property
    def dim(self) -> int:
        return len(self.mean)


def feature_stats(features) -> FeatureStats:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"features must be (M, d), got {x.shape}")
    if len(x) < 2:
        raise ContractError(f"need at least 2 feature rows for a covariance, got {len(x)}")
    mu = x.mean(axis=0)
    centered = x - mu
    cov = centered.T @ centered / (len(x) - 1)
    return FeatureStats(mu, (cov + cov.T) / 2, len(x))


def matrix_sqrt_psd(m) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix; negative eigenvalues clamp to 0."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ShapeError(f"square matrix expected, got {m.shape}")
    scale = max(1.0, np.abs(m).max()) if m.size else 1.0
    if np.abs(m - m.T).max(initial=0.0) > SYMMETRY_TOL * scale:
        raise ContractError("matrix_sqrt_psd needs a symmetric matrix")
    vals, vecs = np.linalg.eigh((m + m.T) / 2)
    root = (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T
    return (root + root.T) / 2


def fid(real: FeatureStats, gen: FeatureStats) -> float:
    if real.dim != gen.dim:
        raise ShapeError(f"feature dimension mismatch: {real.dim} vs {gen.dim}")
    diff = real.mean - gen.mean
    root_r = matrix_sqrt_psd(real.cov)
    inner = root_r @ gen.cov @ root_r
    cross = np.trace(matrix_sqrt_psd((inner + inner.T) / 2))
    value = float(diff @ diff + np.trace(real.cov) + np.trace(gen.cov) - 2.0 * cross)
    return max(value, 0.0) if value > -1e-6 else value


def accuracy_confusion(predictions, labels, num_classes: int) -> Tuple[float, np.ndarray]:
    pred = np.asarray(predictions, dtype=np.int64).ravel()
    true = np.asarray(labels, dtype=np.int64).ravel()
    if len(pred) == 0:
        raise ContractError("accuracy of an empty prediction set")
    if len(pred) != len(true):
        raise ShapeError(f"{len(pred)} predictions for {len(true)} labels")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (true, pred), 1)
    return float(np.trace(conf) / len(pred)), conf


# -- detection ----------------------------------------------------------------

@dataclass
class ImageDetections:
    """Predictions and ground truth for one image; boxes are xyxy in a shared frame."""

    pred_classes: np.ndarray
    pred_scores: np.ndarray
    pred_boxes: np.ndarray
    gt_classes: np.ndarray
    gt_boxes: np.ndarray

    @classmethod
    def make(cls, pred_classes=(), pred_scores=(), pred_boxes=(), gt_classes=(), gt_boxes=()):
        return cls(np.asarray(pred_classes, dtype=np.int64), np.asarray(pred_scores, dtype=np.float64),
                   np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4),
                   np.asarray(gt_classes, dtype=np.int64), np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4))


@dataclass
class MapResult:
    per_class: Dict[int, float]
    map: float
    no_ground_truth: List[int] = field(default_factory=list)


# i/100 rather than linspace so that recall k/n hits a level exactly when k/n == i/100
RECALL_POINTS = np.arange(101) / 100.0


def interpolated_ap(recall: np.ndarray, precision: np.ndarray) -> float:
    """101-point interpolated average precision from a PR sequence."""
    if len(recall) == 0:
        return 0.0
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(recall), envelope[np.minimum(idx, len(recall) - 1)], 0.0)
    return float(sampled.mean())


def _class_ap(results: Sequence[ImageDetections], cls: int, iou_threshold: float) -> Tuple[float, int]:
    entries = []
    n_gt = 0
    for i, r in enumerate(results):
        n_gt += int(np.sum(r.gt_classes == cls))
        for j in np.flatnonzero(r.pred_classes == cls):
            entries.append((-r.pred_scores[j], i, j))
    if not entries:
        return 0.0, n_gt
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    matched = {i: np.zeros(int(np.sum(r.gt_classes == cls)), dtype=bool) for i, r in enumerate(results)}
    tp = np.zeros(len(entries))
    for k, (_, i, j) in enumerate(entries):
        r = results[i]
        gts = r.gt_boxes[r.gt_classes == cls]
        if len(gts) == 0:
            continue
        ious = iou_matrix(r.pred_boxes[j], gts)[0]
        ious[matched[i]] = -1.0
        best = int(np.argmax(ious))
        if ious[best] >= iou_threshold:
            matched[i][best] = True
            tp[k] = 1.0
    if n_gt == 0:
        return 0.0, 0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(entries) + 1)
    return interpolated_ap(recall, precision), n_gt


def mean_average_precision(results: Sequence[ImageDetections], iou_threshold: float = 0.5,
                           num_classes: Optional[int] = None) -> MapResult:
    """Greedy score-ordered matching per class, 101-point interpolated AP.

    Classes enter the mean when they have ground truth or predictions; a class
    with predictions but no ground truth scores 0 and is listed in
    ``no_ground_truth``.
    """
    if not 0.0 < iou_threshold < 1.0:
        raise ContractError(f"iou threshold must be in (0, 1), got {iou_threshold}")
    present = set()
    for r in results:
        present.update(int(c) for c in r.gt_classes)
        present.update(int(c) for c in r.pred_classes)
    if num_classes is not None:
        present = {c for c in present if c < num_classes}
    per_class, missing = {}, []
    for c in sorted(present):
        ap, n_gt = _class_ap(results, c, iou_threshold)
        per_class[c] = ap
        if n_gt == 0:
            missing.append(c)
    value = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return MapResult(per_class, value, missing)


# -- feature extractor --------------------------------------------------------

class FeatureExtractor(Module):
    """Three strided convs and a dense layer; its ReLU output is the feature space."""

    def __init__(self, in_channels: int = 1, image_size: int = 16, feature_dim: int = 64,
                 num_classes: int = 3, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng if rng is not None else Rng(0)
        self.config = {"in_channels": in_channels, "image_size": image_size,
                       "feature_dim": feature_dim, "num_classes": num_classes}
        self.conv1 = Conv2d(in_channels, 8, 3, 1, 1, rng.child(0))
        self.conv2 = Conv2d(8, 16, 3, 2, 1, rng.child(1))
        self.conv3 = Conv2d(16, 32, 3, 2, 1, rng.child(2))
        side = F.conv_output_size(F.conv_output_size(image_size, 3, 2, 1), 3, 2, 1)
        self.fc = Linear(32 * side * side, feature_dim, rng.child(3), init="he")
        self.head = Linear(feature_dim, num_classes, rng.child(4))

    def features(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        h = F.relu(self.conv1(x))
        h = F.relu(self.conv2(h))
        h = F.relu(self.conv3(h))
        return F.relu(self.fc(F.reshape(h, (h.shape[0], -1))))

    def forward(self, x):
        return self.head(self.features(x))


def extract_features(extractor: Optional[FeatureExtractor], images, batch_size: int = 256) -> np.ndarray:
    if extractor is None:
        raise ConfigError("no FID feature extractor checkpoint; create one with `dfkd train-fid-extractor`")
    images = np.asarray(images, dtype=np.float64)
    extractor.eval()
    out = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            out.append(extractor.features(images[i:i + batch_size]).data)
    return np.concatenate(out, axis=0)


def fid_between(extractor: FeatureExtractor, real_images, gen_images) -> float:
    return fid(feature_stats(extract_features(extractor, real_images)),
               feature_stats(extract_features(extractor, gen_images)))
