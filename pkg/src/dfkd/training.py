"""Supervised training of classifiers on real data (teacher, FID extractor)."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, List, Optional

import numpy as np

from .data.augment import augment
from .distill import ce_loss, dataset_batches
from .engine import Adam, Rng
from .errors import ConfigError


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 0.0
    cosine: bool = True
    flip: bool = False
    jitter: float = 0.0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0:
            raise ConfigError("epochs, batch_size and lr must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def _forward_logits(model, x):
    out = model.forward(x)
    return out[0] if isinstance(out, tuple) else out


def predict_classes(model, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    from .engine import no_grad

    model.eval()
    preds = []
    with no_grad():
        for i in range(0, len(images), batch_size):
            preds.append(np.argmax(_forward_logits(model, images[i:i + batch_size]).data, axis=1))
    return np.concatenate(preds)


def train_classifier(model, images: np.ndarray, labels: np.ndarray, config: TrainConfig, rng: Rng,
                     log: Optional[Callable[[dict], None]] = None) -> List[dict]:
    """Adam on cross-entropy; returns per-epoch loss and training accuracy."""
    opt = Adam(model.parameters(), config.lr, weight_decay=config.weight_decay)
    if hasattr(model, "seed_dropout"):
        model.seed_dropout(rng.child(2))
    history = []
    for epoch in range(config.epochs):
        if config.cosine:
            opt.state.lr = config.lr * 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        model.train()
        erng = rng.child(0).child(epoch)
        x_all = augment(images, erng.child(1), config.flip, config.jitter) if (config.flip or config.jitter) else images
        total, count = 0.0, 0
        for x, y in dataset_batches(x_all, labels, config.batch_size, erng.child(0)):
            loss = ce_loss(_forward_logits(model, x), y)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(y)
            count += len(y)
        acc = float(np.mean(predict_classes(model, images) == labels))
        record = {"epoch": epoch + 1, "loss": total / count, "train_acc": acc}
        history.append(record)
        if log:
            log(record)
    return history
