"""Conditional GAN whose generator can be steered by a frozen ViT teacher.

The generator concatenates a small label embedding to the latent vector and
upsamples with transposed convolutions (batchnorm + ReLU between layers,
tanh at the end). The discriminator embeds the label, projects it to one
image-sized plane and stacks it onto the image as an extra channel before a
strided conv stack (LeakyReLU, dropout, batchnorm).

With a teacher attached, each generator update adds
``lambda_attn * mean(1 - cos(probe(G(z, y)), cap[y]))``, where ``probe`` is
the teacher's head-averaged class-token attention over patches and ``cap``
the class's mean probe.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .engine import Adam, Rng, Tensor, no_grad
from .engine import functional as F
from .engine.nn import BatchNorm2d, Conv2d, ConvTranspose2d, Dropout, Embedding, Linear, Module, ModuleList
from .errors import ConfigError, DomainError, ShapeError
from .probes import cosine_similarity_t, probe_tensor

# (out_channels, kernel, stride, padding) per layer
LayerSpec = Tuple[int, int, int, int]


@dataclass
class GanConfig:
    latent_dim: int = 100
    num_classes: int = 3
    g_embed_dim: int = 5
    d_embed_dim: int = 1024
    image_channels: int = 1
    image_size: int = 16
    g_layers: Tuple[LayerSpec, ...] = ((64, 4, 2, 0), (32, 4, 2, 1), (16, 4, 2, 1), (1, 3, 1, 1))
    d_layers: Tuple[LayerSpec, ...] = ((32, 4, 2, 1), (64, 4, 2, 1), (64, 3, 1, 1), (1, 4, 1, 0))
    d_dropout: float = 0.3
    leaky_slope: float = 0.2
    lambda_attn: float = 1.0
    probe_layer: int = -1
    epochs: int = 30
    batch_size: int = 32
    lr: float = 1e-4
    d_lr: Optional[float] = None
    beta1: float = 0.5
    beta2: float = 0.999
    weight_decay: float = 2e-5
    fid_every: int = 0
    fid_samples: int = 300
    ema_decay: float = 0.0   # generator weight averaging; 0 disables

    def __post_init__(self):
        self.g_layers = tuple(tuple(int(v) for v in l) for l in self.g_layers)
        self.d_layers = tuple(tuple(int(v) for v in l) for l in self.d_layers)
        if self.g_layers[-1][0] != self.image_channels:
            raise ConfigError("last generator layer must output image_channels")
        if self.d_layers[-1][0] != 1:
            raise ConfigError("last discriminator layer must output one channel")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.lambda_attn < 0:
            raise ConfigError("lambda_attn must be non-negative")
        size = 1
        for _, k, s, p in self.g_layers:
            size = F.conv_transpose_output_size(size, k, s, p)
        if size != self.image_size:
            raise ConfigError(f"generator layers produce {size}x{size}, image_size is {self.image_size}")
        size = self.image_size
        for _, k, s, p in self.d_layers:
            size = F.conv_output_size(size, k, s, p)
        if size != 1:
            raise ConfigError(f"discriminator layers end at {size}x{size}, expected 1x1")

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return (self.image_channels, self.image_size, self.image_size)

    def to_dict(self) -> dict:
        return asdict(self)


def generator_loss(adv: float, attn: float, lam: float) -> float:
    return adv + lam * attn


class Generator(Module):
    def __init__(self, config: GanConfig, rng: Rng):
        super().__init__()
        self.config = config
        self.label_embed = Embedding(config.num_classes, config.g_embed_dim, rng.child(0))
        cin = config.latent_dim + config.g_embed_dim
        layers, norms = [], []
        for i, (cout, k, s, p) in enumerate(config.g_layers):
            last = i == len(config.g_layers) - 1
            layers.append(ConvTranspose2d(cin, cout, k, s, p, rng.child(10 + i), bias=last))
            if not last:
                norms.append(BatchNorm2d(cout))
            cin = cout
        self.layers = ModuleList(layers)
        self.norms = ModuleList(norms)

    def forward(self, z, labels) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= self.config.num_classes):
            raise DomainError(f"labels must lie in [0, {self.config.num_classes})")
        z = z if isinstance(z, Tensor) else Tensor(z)
        h = F.concat([z, self.label_embed(labels)], axis=1)
        h = F.reshape(h, (h.shape[0], h.shape[1], 1, 1))
        for i, layer in enumerate(self.layers):
            h = layer(h)
            if i < len(self.norms):
                h = F.relu(self.norms[i](h))
        return F.tanh(h)


class Discriminator(Module):
    def __init__(self, config: GanConfig, rng: Rng):
        super().__init__()
        self.config = config
        self.label_embed = Embedding(config.num_classes, config.d_embed_dim, rng.child(0))
        self.label_plane = Linear(config.d_embed_dim, config.image_size ** 2, rng.child(1), init="normal")
        cin = config.image_channels + 1
        convs, norms = [], []
        for i, (cout, k, s, p) in enumerate(config.d_layers):
            convs.append(Conv2d(cin, cout, k, s, p, rng.child(10 + i), init="normal"))
            if 0 < i < len(config.d_layers) - 1:
                norms.append(BatchNorm2d(cout))
            cin = cout
        self.convs = ModuleList(convs)
        self.norms = ModuleList(norms)
        self.drop = Dropout(config.d_dropout)

    def forward(self, images, labels) -> Tensor:
        c = self.config
        x = images if isinstance(images, Tensor) else Tensor(images)
        if x.ndim != 4 or x.shape[1:] != c.image_shape:
            raise ShapeError(f"discriminator expects (B, {c.image_shape}) images, got {x.shape}")
        plane = self.label_plane(self.label_embed(np.asarray(labels, dtype=np.int64)))
        h = F.concat([x, F.reshape(plane, (x.shape[0], 1, c.image_size, c.image_size))], axis=1)
        n = len(self.convs)
        for i, conv in enumerate(self.convs):
            h = conv(h)
            if i == n - 1:
                break
            if 0 < i:
                h = self.norms[i - 1](h)
            h = self.drop(F.leaky_relu(h, c.leaky_slope))
        return F.reshape(h, (x.shape[0],))


@dataclass
class SynthDataset:
    images: np.ndarray
    labels: np.ndarray
    provenance: Dict[str, object] = field(default_factory=dict)


def sample_latent(rng: Rng, n: int, dim: int) -> np.ndarray:
    return rng.normal((n, dim))


def synthesize(generator: Generator, count: int, rng: Rng, class_weights: Optional[Sequence[float]] = None,
               batch_size: int = 256, provenance: Optional[dict] = None) -> SynthDataset:
    """Draw ``count`` images; labels uniform, or from ``class_weights`` if given."""
    if count < 1:
        raise DomainError("synthesize needs count >= 1")
    c = generator.config
    if class_weights is None:
        labels = rng.child(0).integers(0, c.num_classes, count)
    else:
        w = np.asarray(class_weights, dtype=np.float64)
        if len(w) != c.num_classes or w.min() < 0 or w.sum() <= 0:
            raise DomainError("class_weights must be non-negative, one per class, not all zero")
        labels = rng.child(0).generator.choice(c.num_classes, size=count, p=w / w.sum())
    z = sample_latent(rng.child(1), count, c.latent_dim)
    generator.eval()
    out = []
    with no_grad():
        for i in range(0, count, batch_size):
            out.append(generator.forward(z[i:i + batch_size], labels[i:i + batch_size]).data)
    prov = dict(provenance or {})
    prov.update({"seed": rng.seed, "path": list(rng.path), "count": count})
    return SynthDataset(np.concatenate(out), labels.astype(np.int64), prov)


def attention_term(teacher, images: Tensor, labels: np.ndarray, caps: np.ndarray, layer: int = -1) -> Tensor:
    """Batch mean of 1 - cos(teacher probe of each image, CAP of its label)."""
    _, atts = teacher.forward(images)
    probes = probe_tensor(atts[layer])
    return F.mean(F.sub(1.0, cosine_similarity_t(probes, caps[labels])))


def train_gan(config: GanConfig, images: np.ndarray, labels: np.ndarray, rng: Rng, teacher=None,
              caps: Optional[np.ndarray] = None, fid_fn: Optional[Callable[[Generator], float]] = None,
              log: Optional[Callable[[dict], None]] = None):
    """Alternating D/G updates; returns ``(generator, discriminator, history)``.

    ``caps`` is a (num_classes, N) matrix of class attention probes and is
    required when ``teacher`` is given. ``fid_fn`` is called every
    ``fid_every`` epochs and after the last one when ``fid_every > 0``.
    """
    if teacher is not None:
        if caps is None:
            raise ConfigError("a teacher needs class attention probes for every class")
        caps = np.asarray(caps, dtype=np.float64)
        if caps.shape[0] != config.num_classes:
            raise ConfigError(f"got class attention probes for {caps.shape[0]} of {config.num_classes} classes")
        teacher.eval()
        teacher.requires_grad_(False)
    gen = Generator(config, rng.child(0))
    disc = Discriminator(config, rng.child(1))
    disc.drop.seed(rng.child(2))
    betas = (config.beta1, config.beta2)
    g_opt = Adam(gen.parameters(), config.lr, betas, weight_decay=config.weight_decay)
    d_opt = Adam(disc.parameters(), config.d_lr or config.lr, betas, weight_decay=config.weight_decay)
    ones, zeros = np.ones(config.batch_size), np.zeros(config.batch_size)
    named = list(gen.named_parameters())
    ema = {k: p.data.copy() for k, p in named} if config.ema_decay > 0 else None
    history = []
    for epoch in range(config.epochs):
        gen.train()
        disc.train()
        erng = rng.child(3).child(epoch)
        order = erng.child(0).permutation(len(images))
        sums = {"d_loss": 0.0, "g_adv": 0.0, "g_attn": 0.0}
        steps = 0
        for step, start in enumerate(range(0, len(order) - config.batch_size + 1, config.batch_size)):
            idx = order[start:start + config.batch_size]
            srng = erng.child(1).child(step)
            z = sample_latent(srng.child(0), config.batch_size, config.latent_dim)
            fake_labels = srng.child(1).integers(0, config.num_classes, config.batch_size)
            fake = gen.forward(z, fake_labels)

            d_real = disc.forward(images[idx], labels[idx])
            d_fake = disc.forward(fake.detach(), fake_labels)
            d_loss = F.mul(F.add(F.bce_with_logits(d_real, ones), F.bce_with_logits(d_fake, zeros)), 0.5)
            d_opt.zero_grad()
            d_loss.backward()
            d_opt.step()

            g_adv = F.bce_with_logits(disc.forward(fake, fake_labels), ones)
            g_total, attn_value = g_adv, float("nan")
            if teacher is not None:
                if config.lambda_attn > 0:
                    attn = attention_term(teacher, fake, fake_labels, caps, config.probe_layer)
                    g_total = F.add(g_adv, F.mul(attn, config.lambda_attn))
                    attn_value = attn.item()
                else:
                    with no_grad():
                        attn_value = attention_term(teacher, fake.detach(), fake_labels, caps,
                                                    config.probe_layer).item()
            g_opt.zero_grad()
            g_total.backward()
            g_opt.step()
            if ema is not None:
                for k, p in named:
                    ema[k] *= config.ema_decay
                    ema[k] += (1.0 - config.ema_decay) * p.data

            sums["d_loss"] += d_loss.item()
            sums["g_adv"] += g_adv.item()
            sums["g_attn"] += attn_value
            steps += 1
        record = {"epoch": epoch + 1, **{k: v / max(steps, 1) for k, v in sums.items()}, "fid": float("nan")}
        last = epoch == config.epochs - 1
        if fid_fn is not None and config.fid_every > 0 and ((epoch + 1) % config.fid_every == 0 or last):
            with _averaged(gen, named, ema):
                record["fid"] = float(fid_fn(gen))
        history.append(record)
        if log:
            log(record)
    if ema is not None:
        for k, p in named:
            p.data = ema[k].copy()
    return gen, disc, history


class _averaged:
    """Temporarily swap averaged weights into the generator."""

    def __init__(self, gen, named, ema):
        self.named, self.ema, self.saved = named, ema, None

    def __enter__(self):
        if self.ema is not None:
            self.saved = [p.data for _, p in self.named]
            for k, p in self.named:
                p.data = self.ema[k].copy()

    def __exit__(self, *exc):
        if self.saved is not None:
            for (_, p), d in zip(self.named, self.saved):
                p.data = d
