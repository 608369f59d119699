"""Optional training-time augmentation: horizontal flips and pixel jitter."""
from __future__ import annotations

import numpy as np

from ..engine import Rng


def augment(images: np.ndarray, rng: Rng, flip: bool = False, jitter: float = 0.0,
            low: float = -1.0, high: float = 1.0) -> np.ndarray:
    """Flip each (.., H, W) image with probability 1/2; add uniform noise of half-width ``jitter``."""
    out = np.array(images, dtype=np.float64, copy=True)
    if flip:
        mask = rng.child(0).random(len(out)) < 0.5
        out[mask] = out[mask][..., ::-1]
    if jitter > 0.0:
        out = np.clip(out + rng.child(1).uniform(-jitter, jitter, out.shape), low, high)
    return out
