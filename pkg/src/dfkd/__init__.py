"""Data-free knowledge distillation for vision transformers, at desk scale.

Subpackages
-----------
engine
    float64 tensors with reverse-mode autodiff, layers, optimizers.
data
    procedural datasets, COCO I/O, checkpoints, config files, image dumps.
detr
    a small detection transformer plus its preprocessing and losses.

Top-level modules hold the ViT classifier (:mod:`dfkd.vit`), attention
probes (:mod:`dfkd.probes`), the conditional GAN (:mod:`dfkd.gan`), the
classification distillation loop (:mod:`dfkd.distill`) and the metrics
(:mod:`dfkd.metrics`).
"""

__version__ = "0.1.0"
