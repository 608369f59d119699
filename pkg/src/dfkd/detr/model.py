"""Small encoder-decoder detection transformer.

Strided conv backbone -> 1x1 projection -> flattened tokens plus 2-D sine
positions -> post-norm encoder -> decoder over learned object queries ->
class logits (sigmoid/BCE, no background class) and sigmoid boxes.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import List, Optional, Tuple

import numpy as np

from ..engine import Rng, Tensor, no_grad
from ..engine import functional as F
from ..engine.nn import Conv2d, Dropout, LayerNorm, Linear, Module, ModuleList, Parameter
from ..errors import ConfigError, ShapeError
from .preprocess import MEAN, STD


@dataclass
class DetrConfig:
    in_channels: int = 3
    image_size: int = 64
    backbone: Tuple[Tuple[int, int], ...] = ((16, 2), (32, 2), (64, 2), (64, 1))  # (channels, stride)
    embed_dim: int = 64
    encoder_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 4
    ffn_dim: int = 128
    num_queries: int = 8
    num_classes: int = 3
    dropout: float = 0.0
    shortest: int = 64
    longest: int = 96
    mean: Tuple[float, ...] = MEAN
    std: Tuple[float, ...] = STD

    def __post_init__(self):
        self.backbone = tuple(tuple(int(v) for v in s) for s in self.backbone)
        self.mean, self.std = tuple(self.mean), tuple(self.std)
        if self.embed_dim % self.num_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        if min(self.num_queries, self.num_classes, self.encoder_layers, self.decoder_layers) < 1:
            raise ConfigError("queries, classes and layer counts must be positive")

    @property
    def feature_size(self) -> int:
        size = self.image_size
        for _, stride in self.backbone:
            size = F.conv_output_size(size, 3, stride, 1)
        return size

    def to_dict(self) -> dict:
        return asdict(self)


# Full-size reference shapes (6/6 layers, 8 heads teacher; 2/2 student); the
# backbone stays the desk stand-in, so parameter totals are not comparable.
REFERENCE_TEACHER = dict(encoder_layers=6, decoder_layers=6, num_heads=8, embed_dim=256, ffn_dim=2048, num_queries=100)
REFERENCE_STUDENT = dict(encoder_layers=2, decoder_layers=2, num_heads=8, embed_dim=256, ffn_dim=2048, num_queries=100)


def sine_positions(height: int, width: int, dim: int, temperature: float = 10000.0) -> np.ndarray:
    """(H*W, dim) 2-D sine/cosine encoding; first half encodes y, second half x."""
    if dim % 4:
        raise ConfigError(f"positional encoding dim {dim} must be divisible by 4")
    half = dim // 2
    freqs = temperature ** (2 * (np.arange(half // 2)) / half)
    ys = (np.arange(height) + 0.5) / height * 2 * math.pi
    xs = (np.arange(width) + 0.5) / width * 2 * math.pi

    def enc(v):
        a = v[:, None] / freqs[None, :]
        return np.concatenate([np.sin(a), np.cos(a)], axis=1)

    ey, ex = enc(ys), enc(xs)
    grid_y = np.repeat(ey, width, axis=0)
    grid_x = np.tile(ex, (height, 1))
    return np.concatenate([grid_y, grid_x], axis=1)


def attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tuple[Tensor, Tensor]:
    """Scaled dot-product attention over already-projected (B, T, D) inputs."""
    b, tq, d = q.shape
    tk = k.shape[1]
    dh = d // num_heads

    def heads(x, t):
        return F.transpose(F.reshape(x, (b, t, num_heads, dh)), (0, 2, 1, 3))

    qh, kh, vh = heads(q, tq), heads(k, tk), heads(v, tk)
    att = F.softmax(F.mul(F.matmul(qh, F.swapaxes(kh, -1, -2)), 1.0 / math.sqrt(dh)), axis=-1)
    out = F.reshape(F.transpose(F.matmul(att, vh), (0, 2, 1, 3)), (b, tq, d))
    return out, att


class MultiheadAttention(Module):
    def __init__(self, dim: int, num_heads: int, rng: Rng):
        super().__init__()
        self.num_heads = num_heads
        self.q_proj = Linear(dim, dim, rng.child(0), init="xavier")
        self.k_proj = Linear(dim, dim, rng.child(1), init="xavier")
        self.v_proj = Linear(dim, dim, rng.child(2), init="xavier")
        self.out_proj = Linear(dim, dim, rng.child(3), init="xavier")

    def forward(self, query, key, value):
        out, att = attention(self.q_proj(query), self.k_proj(key), self.v_proj(value), self.num_heads)
        return self.out_proj(out), att


class FeedForward(Module):
    def __init__(self, dim: int, hidden: int, drop: float, rng: Rng):
        super().__init__()
        self.fc1 = Linear(dim, hidden, rng.child(0), init="xavier")
        self.fc2 = Linear(hidden, dim, rng.child(1), init="xavier")
        self.drop = Dropout(drop)

    def forward(self, x):
        return self.fc2(self.drop(F.relu(self.fc1(x))))


class EncoderLayer(Module):
    def __init__(self, cfg: DetrConfig, rng: Rng):
        super().__init__()
        self.self_attn = MultiheadAttention(cfg.embed_dim, cfg.num_heads, rng.child(0))
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim, cfg.dropout, rng.child(1))
        self.norm2 = LayerNorm(cfg.embed_dim)

    def forward(self, x, pos):
        qk = F.add(x, pos)
        y, _ = self.self_attn(qk, qk, x)
        x = self.norm1(F.add(x, y))
        return self.norm2(F.add(x, self.ffn(x)))


class DecoderLayer(Module):
    def __init__(self, cfg: DetrConfig, rng: Rng):
        super().__init__()
        self.self_attn = MultiheadAttention(cfg.embed_dim, cfg.num_heads, rng.child(0))
        self.norm1 = LayerNorm(cfg.embed_dim)
        self.cross_attn = MultiheadAttention(cfg.embed_dim, cfg.num_heads, rng.child(1))
        self.norm2 = LayerNorm(cfg.embed_dim)
        self.ffn = FeedForward(cfg.embed_dim, cfg.ffn_dim, cfg.dropout, rng.child(2))
        self.norm3 = LayerNorm(cfg.embed_dim)

    def forward(self, tgt, query_pos, memory, pos):
        qk = F.add(tgt, query_pos)
        y, _ = self.self_attn(qk, qk, tgt)
        tgt = self.norm1(F.add(tgt, y))
        y, cross = self.cross_attn(F.add(tgt, query_pos), F.add(memory, pos), memory)
        tgt = self.norm2(F.add(tgt, y))
        return self.norm3(F.add(tgt, self.ffn(tgt))), cross


@dataclass
class DetrOutput:
    class_logits: Tensor        # (B, Q, C)
    pred_boxes: Tensor          # (B, Q, 4) cx, cy, w, h in [0, 1]
    cross_attention: List[Tensor]


class DetrLite(Module):
    def __init__(self, config: DetrConfig, rng: Optional[Rng] = None):
        super().__init__()
        rng = rng if rng is not None else Rng(0)
        self.config = c = config
        convs, cin = [], c.in_channels
        for i, (cout, stride) in enumerate(c.backbone):
            convs.append(Conv2d(cin, cout, 3, stride, 1, rng.child(i)))
            cin = cout
        self.backbone = ModuleList(convs)
        self.input_proj = Conv2d(cin, c.embed_dim, 1, 1, 0, rng.child(20))
        self.encoder = ModuleList([EncoderLayer(c, rng.child(30 + i)) for i in range(c.encoder_layers)])
        self.decoder = ModuleList([DecoderLayer(c, rng.child(60 + i)) for i in range(c.decoder_layers)])
        self.query_pos = Parameter(rng.child(21).normal((c.num_queries, c.embed_dim)))
        self.class_head = Linear(c.embed_dim, c.num_classes, rng.child(22), init="xavier")
        self.box_mlp = ModuleList([Linear(c.embed_dim, c.embed_dim, rng.child(23), init="xavier"),
                                   Linear(c.embed_dim, c.embed_dim, rng.child(24), init="xavier"),
                                   Linear(c.embed_dim, 4, rng.child(25), init="xavier")])
        s = c.feature_size
        self._pos = sine_positions(s, s, c.embed_dim)

    def forward(self, images) -> DetrOutput:
        c = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim == 3:
            x = F.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise ShapeError(f"backbone: expected (B, {c.in_channels}, {c.image_size}, {c.image_size}) "
                             f"input, got {x.shape}")
        for conv in self.backbone:
            x = F.relu(conv(x))
        x = self.input_proj(x)
        b, d = x.shape[:2]
        pos = self._pos[None]
        # positions also enter the token values, so box regression can read location off attended values
        memory = F.add(F.transpose(F.reshape(x, (b, d, -1)), (0, 2, 1)), pos)
        for layer in self.encoder:
            memory = layer(memory, pos)
        tgt = Tensor(np.zeros((b, c.num_queries, d)))
        query_pos = F.mul(self.query_pos, np.ones((b, 1, 1)))
        crosses = []
        for layer in self.decoder:
            tgt, cross = layer(tgt, query_pos, memory, pos)
            crosses.append(cross)
        h = tgt
        for i, lin in enumerate(self.box_mlp):
            h = lin(h)
            if i < len(self.box_mlp) - 1:
                h = F.relu(h)
        return DetrOutput(self.class_head(tgt), F.sigmoid(h), crosses)

    def predict(self, images: np.ndarray, batch_size: int = 64) -> Tuple[np.ndarray, np.ndarray]:
        self.eval()
        logits, boxes = [], []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out = self.forward(images[i:i + batch_size])
                logits.append(out.class_logits.data)
                boxes.append(out.pred_boxes.data)
        return np.concatenate(logits), np.concatenate(boxes)


def detr_forward(image, config: DetrConfig, weights) -> DetrOutput:
    """Single preprocessed (C, H, W) image through a model built from ``weights``."""
    model = DetrLite(config)
    model.load_state_dict(weights)
    model.eval()
    out = model.forward(image)
    return DetrOutput(F.reshape(out.class_logits, out.class_logits.shape[1:]),
                      F.reshape(out.pred_boxes, out.pred_boxes.shape[1:]), out.cross_attention)
