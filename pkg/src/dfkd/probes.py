"""Attention probes, class attention probes and their cosine comparison.

An attention probe is the class-token row of an attention map restricted to
the patch columns. A class attention probe is the mean probe over the images
of one class. Probes are not renormalised after dropping the class-token
entry, so their entries sum to at most one.

The scalar functions here work on plain vectors; the ``*_t`` variants work on
batched tensors and are differentiable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Union

import numpy as np

from .engine import Tensor, no_grad
from .engine import functional as F
from .errors import ContractError, DomainError, ShapeError

LayerSelect = Union[int, str]


@dataclass
class AttentionProbe:
    values: np.ndarray
    layer: int = -1
    head_agg: str = "mean"

    def __len__(self):
        return len(self.values)


@dataclass
class ClassAttentionProbe:
    class_id: int
    values: np.ndarray
    sample_count: int
    source: str = field(default="unspecified")


def _resolve_layer(layers: Sequence[int], layer: LayerSelect) -> int:
    if layer == "last":
        layer = -1
    n = max(layers) + 1
    idx = int(layer)
    if not -n <= idx < n:
        raise IndexError(f"layer {layer} out of range for {n} layers")
    return idx % n


def extract_probe(maps, layer: LayerSelect = -1, head_agg: Union[str, int] = "mean") -> AttentionProbe:
    """Probe from a list of :class:`~dfkd.vit.AttentionMap` for one image.

    ``head_agg`` is ``"mean"`` (average over heads) or a head index.
    """
    if not maps:
        raise ContractError("no attention maps given")
    chosen = _resolve_layer([m.layer for m in maps], layer)
    selected = sorted((m for m in maps if m.layer == chosen), key=lambda m: m.head)
    if not selected:
        raise IndexError(f"no attention maps for layer {chosen}")
    if head_agg == "mean":
        row = np.mean([m.matrix[0] for m in selected], axis=0)
    else:
        row = selected[int(head_agg)].matrix[0]
    return AttentionProbe(np.array(row[1:], dtype=np.float64), chosen, str(head_agg))


def class_attention_probe(probes: Sequence, class_id: int = -1, source: str = "unspecified") -> ClassAttentionProbe:
    if len(probes) == 0:
        raise ContractError("class attention probe needs at least one probe")
    arrays = [np.asarray(p.values if isinstance(p, AttentionProbe) else p, dtype=np.float64) for p in probes]
    n = len(arrays[0])
    if any(len(a) != n for a in arrays):
        raise ShapeError("probes differ in length")
    return ClassAttentionProbe(class_id, np.mean(arrays, axis=0), len(arrays), source)


def _values(x) -> np.ndarray:
    if isinstance(x, (AttentionProbe, ClassAttentionProbe)):
        return np.asarray(x.values, dtype=np.float64)
    return np.asarray(x, dtype=np.float64)


def cosine_similarity(u, v) -> float:
    u, v = _values(u), _values(v)
    if u.shape != v.shape:
        raise ShapeError(f"cosine similarity of shapes {u.shape} and {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DomainError("cosine similarity undefined for a zero vector")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def attention_consistency_loss(ap, cap):
    """``1 - cos(ap, cap)``; differentiable when ``ap`` is a Tensor."""
    if isinstance(ap, Tensor):
        target = _values(cap)
        if ap.shape[-1] != target.shape[-1]:
            raise ShapeError(f"probe length {ap.shape[-1]} != {target.shape[-1]}")
        return F.sub(1.0, cosine_similarity_t(ap, target))
    return 1.0 - cosine_similarity(ap, cap)


# -- batched tensor forms ---------------------------------------------------

def probe_tensor(attention: Tensor, head_agg: Union[str, int] = "mean") -> Tensor:
    """(B, H, T, T) attention -> (B, N) probes (class row, patch columns)."""
    rows = attention[:, :, 0, 1:]
    if head_agg == "mean":
        return F.mean(rows, axis=1)
    return rows[:, int(head_agg)]


def cosine_similarity_t(u: Tensor, v) -> Tensor:
    """Row-wise cosine similarity along the last axis; ``v`` may be a tensor or array."""
    dot = F.sum(F.mul(u, v), axis=-1)
    nu = F.sqrt(F.sum(F.mul(u, u), axis=-1))
    vv = v if isinstance(v, Tensor) else Tensor(v)
    nv = F.sqrt(F.sum(F.mul(vv, vv), axis=-1))
    return F.div(dot, F.mul(nu, nv))


def compute_class_probes(model, images: np.ndarray, num_classes: int, labels: Optional[np.ndarray] = None,
                         layer: LayerSelect = -1, batch_size: int = 128,
                         source: str = "teacher-labelled") -> Dict[int, ClassAttentionProbe]:
    """Class attention probes from a trained ViT.

    Images are grouped by ``labels`` when given, otherwise by the model's own
    predictions. Classes with no images fall back to the mean over all images.
    """
    probes, preds = [], []
    model.eval()
    with no_grad():
        for i in range(0, len(images), batch_size):
            logits, atts = model.forward(images[i:i + batch_size])
            idx = _resolve_layer(list(range(len(atts))), layer)
            probes.append(probe_tensor(atts[idx]).data)
            preds.append(np.argmax(logits.data, axis=1))
    probes = np.concatenate(probes)
    groups = labels if labels is not None else np.concatenate(preds)
    caps = {}
    for c in range(num_classes):
        members = probes[groups == c]
        if len(members):
            caps[c] = class_attention_probe(list(members), c, source)
        else:
            caps[c] = class_attention_probe(list(probes), c, source + ":all-images-fallback")
    return caps


def caps_matrix(caps: Dict[int, ClassAttentionProbe], num_classes: int) -> np.ndarray:
    missing = [c for c in range(num_classes) if c not in caps]
    if missing:
        raise ContractError(f"missing class attention probes for classes {missing}")
    return np.stack([caps[c].values for c in range(num_classes)])
