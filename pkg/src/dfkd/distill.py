"""Teacher -> student distillation for classification on synthesized images.

The objective is a weighted sum of three terms:

* ``kd_loss``: T^2-scaled KL divergence from the softened teacher
  distribution to the softened student distribution, averaged over the batch;
* ``ce_loss``: cross-entropy against the labels the images were generated for;
* ``patch_attention_loss``: 1 - cosine similarity between head-averaged
  class-token attention probes of mapped student/teacher layers.

The teacher is frozen and runs in eval mode throughout.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import AdamW, Rng, Tensor, no_grad
from .engine import functional as F
from .errors import ConfigError, DomainError, ShapeError
from .metrics import accuracy_confusion
from .probes import cosine_similarity_t, probe_tensor


@dataclass
class DistillConfig:
    temperature: float = 4.0
    lambda_kd: float = 1.0
    lambda_ce: float = 1.0
    lambda_patch: float = 1.0
    epochs: int = 20
    batch_size: int = 64
    lr: float = 7.5e-4
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 0.025
    layer_map: Optional[Tuple[int, ...]] = None

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        lams = (self.lambda_kd, self.lambda_ce, self.lambda_patch)
        if min(lams) < 0 or max(lams) == 0:
            raise ConfigError("loss weights must be non-negative with at least one positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.layer_map is not None:
            self.layer_map = tuple(int(v) for v in self.layer_map)

    def to_dict(self) -> dict:
        return asdict(self)


# -- loss terms -----------------------------------------------------------------

def _log_softmax_np(x: np.ndarray, axis: int = -1) -> np.ndarray:
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def kd_loss(student_logits, teacher_logits, temperature: float) -> Tensor:
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    t = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits, dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"student logits {s.shape} vs teacher logits {t.shape}")
    if temperature <= 0:
        raise DomainError(f"temperature must be positive, got {temperature}")
    log_q = _log_softmax_np(t / temperature)
    q = np.exp(log_q)
    log_p = F.log_softmax_t(s, temperature, axis=-1)
    per_row = F.sum(F.mul(q, F.sub(log_q, log_p)), axis=-1)
    return F.mul(F.mean(per_row), temperature ** 2)


def _one_hot(labels, num_classes: int) -> np.ndarray:
    arr = np.asarray(labels)
    if arr.ndim == 2:
        if arr.shape[1] != num_classes:
            raise ShapeError(f"one-hot labels have {arr.shape[1]} columns for {num_classes} classes")
        return arr.astype(np.float64)
    ids = arr.astype(np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= num_classes):
        raise DomainError(f"labels must lie in [0, {num_classes}), got range [{ids.min()}, {ids.max()}]")
    return np.eye(num_classes)[ids]


def ce_loss(student_logits, labels) -> Tensor:
    s = student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits)
    y = _one_hot(labels, s.shape[-1])
    if y.shape[0] != s.shape[0]:
        raise ShapeError(f"{y.shape[0]} labels for {s.shape[0]} rows of logits")
    return F.neg(F.mean(F.sum(F.mul(y, F.log_softmax_t(s, 1.0, axis=-1)), axis=-1)))


def default_layer_map(student_depth: int, teacher_depth: int) -> Tuple[int, ...]:
    """Student layer i -> teacher layer ceil((i + 1) * L_T / L_S) - 1."""
    return tuple(math.ceil((i + 1) * teacher_depth / student_depth) - 1 for i in range(student_depth))


def patch_attention_loss(teacher_atts: Sequence, student_atts: Sequence[Tensor],
                         layer_map: Optional[Sequence[int]] = None) -> Tensor:
    """Mean over mapped layers and batch of 1 - cos(student probe, teacher probe).

    Attention inputs are per-layer (B, H, T, T) tensors; teacher maps are
    treated as constants.
    """
    layer_map = tuple(layer_map) if layer_map is not None else default_layer_map(len(student_atts), len(teacher_atts))
    if len(layer_map) != len(student_atts):
        raise ConfigError(f"layer map has {len(layer_map)} entries for {len(student_atts)} student layers")
    terms = []
    for s_idx, t_idx in enumerate(layer_map):
        if not 0 <= t_idx < len(teacher_atts):
            raise ConfigError(f"layer map sends student layer {s_idx} to missing teacher layer {t_idx}")
        t_att = teacher_atts[t_idx]
        t_att = t_att.data if isinstance(t_att, Tensor) else np.asarray(t_att)
        s_att = student_atts[s_idx]
        if s_att.shape[-1] != t_att.shape[-1] or s_att.shape[0] != t_att.shape[0]:
            raise ConfigError(f"student attention {s_att.shape} and teacher attention {t_att.shape} cover "
                              "different patch grids; use the same image and patch size for both models")
        t_probe = t_att[:, :, 0, 1:].mean(axis=1)
        cos = cosine_similarity_t(probe_tensor(s_att), t_probe)
        terms.append(F.mean(F.sub(1.0, cos)))
    total = terms[0]
    for t in terms[1:]:
        total = F.add(total, t)
    return F.div(total, float(len(terms)))


def total_loss(l_kd, l_ce, l_patch, config: DistillConfig):
    """lambda_kd * l_kd + lambda_ce * l_ce + lambda_patch * l_patch (floats or tensors)."""
    parts = [(config.lambda_kd, l_kd), (config.lambda_ce, l_ce), (config.lambda_patch, l_patch)]
    if not any(isinstance(v, Tensor) for _, v in parts):
        return sum(lam * float(v) for lam, v in parts)
    out = None
    for lam, v in parts:
        term = F.mul(v, lam)
        out = term if out is None else F.add(out, term)
    return out


# -- training loop --------------------------------------------------------------

BatchSource = Callable[[Rng, int], Tuple[np.ndarray, np.ndarray]]


def dataset_batches(images: np.ndarray, labels: np.ndarray, batch_size: int, rng: Rng):
    order = rng.permutation(len(images))
    for i in range(0, len(order), batch_size):
        idx = order[i:i + batch_size]
        yield images[idx], labels[idx]


def evaluate(model, images: np.ndarray, labels: np.ndarray, num_classes: int):
    model.eval()
    preds = np.argmax(model.predict(images), axis=1)
    return accuracy_confusion(preds, labels, num_classes)


def distill(teacher, student, synth_images: np.ndarray, synth_labels: np.ndarray, config: DistillConfig,
            rng: Rng, validation: Optional[Tuple[np.ndarray, np.ndarray]] = None,
            log: Optional[Callable[[dict], None]] = None):
    """Train ``student`` on synthesized images under the weighted objective.

    Returns ``(history, confusion)``: one record per epoch with the mean of
    each loss term and the validation accuracy (NaN without validation data),
    and the final-epoch validation confusion matrix (or None).
    """
    t_cfg, s_cfg = teacher.config, student.config
    if t_cfg.num_classes != s_cfg.num_classes:
        raise ConfigError("teacher and student disagree on the number of classes")
    if config.lambda_patch > 0 and t_cfg.num_patches != s_cfg.num_patches:
        raise ConfigError(f"patch grids differ (teacher {t_cfg.num_patches}, student {s_cfg.num_patches} "
                          "patches); match image and patch sizes or set lambda_patch = 0")
    same_grid = t_cfg.num_patches == s_cfg.num_patches
    layer_map = config.layer_map or default_layer_map(s_cfg.depth, t_cfg.depth)
    teacher.eval()
    teacher.requires_grad_(False)
    opt = AdamW(student.parameters(), config.lr, (config.beta1, config.beta2), weight_decay=config.weight_decay)
    student.seed_dropout(rng.child(1))
    history, confusion = [], None
    for epoch in range(config.epochs):
        student.train()
        sums = np.zeros(4)
        batches = 0
        for x, y in dataset_batches(synth_images, synth_labels, config.batch_size, rng.child(0).child(epoch)):
            with no_grad():
                t_logits, t_atts = teacher.forward(x)
            s_logits, s_atts = student.forward(x)
            l_kd = kd_loss(s_logits, t_logits, config.temperature)
            l_ce = ce_loss(s_logits, y)
            if config.lambda_patch > 0:
                l_patch = patch_attention_loss(t_atts, s_atts, layer_map)
            elif same_grid:
                # logged for the ablation curves, kept out of the gradient
                l_patch = Tensor(patch_attention_loss(t_atts, [a.detach() for a in s_atts], layer_map).item())
            else:
                l_patch = Tensor(float("nan"))
            loss = total_loss(l_kd, l_ce, l_patch if config.lambda_patch > 0 else 0.0, config)
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [l_kd.item(), l_ce.item(), l_patch.item(), loss.item()]
            batches += 1
        means = sums / max(batches, 1)
        val_acc = float("nan")
        if validation is not None:
            val_acc, confusion = evaluate(student, validation[0], validation[1], s_cfg.num_classes)
        record = {"epoch": epoch + 1, "kd": means[0], "ce": means[1], "patch": means[2], "total": means[3],
                  "val_acc": val_acc}
        history.append(record)
        if log:
            log(record)
    return history, confusion


ABLATIONS = {"full": {}, "no_kd": {"lambda_kd": 0.0}, "no_ce": {"lambda_ce": 0.0}, "no_patch": {"lambda_patch": 0.0}}


def ablation_configs(base: DistillConfig) -> Dict[str, DistillConfig]:
    """The full objective plus one variant per disabled term."""
    import dataclasses

    return {name: dataclasses.replace(base, **change) for name, change in ABLATIONS.items()}
