"""Detection input pipeline: resize to edge bounds, rescale, normalise, boxes to (cx, cy, w, h)."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Sequence, Tuple

import numpy as np

from ..errors import ContractError

RESCALE = 0.00392156862745098
MEAN = (0.485, 0.456, 0.406)
STD = (0.229, 0.224, 0.225)


@dataclass
class DetectionTarget:
    labels: np.ndarray                    # (G,) int64
    boxes: np.ndarray                     # (G, 4) normalised cx, cy, w, h
    rejected: List[dict] = field(default_factory=list)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)

    def __len__(self) -> int:
        return len(self.labels)


def resize_dims(height: int, width: int, shortest: int, longest: int) -> Tuple[int, int]:
    """Scale so the short edge is ``shortest`` unless that pushes the long edge past ``longest``."""
    short, long_ = min(height, width), max(height, width)
    scale = shortest / short
    if long_ * scale > longest:
        scale = longest / long_
        new_long = longest
    else:
        new_long = int(round(long_ * scale))
    new_short = int(round(short * scale))
    return (new_short, new_long) if height <= width else (new_long, new_short)


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Half-pixel-centre bilinear resize of an (H, W, C) array; identity when the size is unchanged."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.astype(np.float64, copy=True)
    img = image.astype(np.float64)

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, wy = coords(height, h)
    x0, x1, wx = coords(width, w)
    wy, wx = wy[:, None, None], wx[None, :, None]
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy) + bottom * wy


def normalize_pixels(image: np.ndarray, mean: Sequence[float] = MEAN, std: Sequence[float] = STD) -> np.ndarray:
    """(H, W, C) 0..255 values -> (C, H, W) normalised floats."""
    x = np.asarray(image, dtype=np.float64) * RESCALE
    x = (x - np.asarray(mean)) / np.asarray(std)
    return np.ascontiguousarray(x.transpose(2, 0, 1))


def boxes_to_normalized(boxes_xywh: np.ndarray, width: float, height: float) -> np.ndarray:
    b = np.asarray(boxes_xywh, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] + b[:, 2] / 2) / width, (b[:, 1] + b[:, 3] / 2) / height,
                     b[:, 2] / width, b[:, 3] / height], axis=1)


def boxes_from_normalized(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    b = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([(b[:, 0] - b[:, 2] / 2) * width, (b[:, 1] - b[:, 3] / 2) * height,
                     b[:, 2] * width, b[:, 3] * height], axis=1)


def preprocess_detection(image: np.ndarray, labels: Sequence[int], boxes_xywh, shortest: int = 64,
                         longest: int = 96, mean=MEAN, std=STD) -> Tuple[np.ndarray, DetectionTarget]:
    """Resize, rescale and normalise an (H, W, 3) image; convert its absolute xywh boxes.

    Boxes are clipped to the image; any with zero width or height afterwards
    are dropped and described in ``target.rejected``.
    """
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[0] == 0 or image.shape[1] == 0:
        raise ContractError(f"expected a non-empty (H, W, C) image, got shape {image.shape}")
    h, w = image.shape[:2]
    nh, nw = resize_dims(h, w, shortest, longest)
    pixels = normalize_pixels(resize_bilinear(image, nh, nw), mean, std)
    b = np.asarray(boxes_xywh, dtype=np.float64).reshape(-1, 4)
    x1 = np.clip(b[:, 0], 0, w)
    y1 = np.clip(b[:, 1], 0, h)
    x2 = np.clip(b[:, 0] + b[:, 2], 0, w)
    y2 = np.clip(b[:, 1] + b[:, 3], 0, h)
    clipped = np.stack([x1, y1, x2 - x1, y2 - y1], axis=1)
    keep = (clipped[:, 2] > 0) & (clipped[:, 3] > 0)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    rejected = [{"index": int(i), "label": int(labels[i]), "bbox": b[i].tolist(), "reason": "degenerate box"}
                for i in np.flatnonzero(~keep)]
    target = DetectionTarget(labels[keep], boxes_to_normalized(clipped[keep], w, h), rejected)
    return pixels, target
