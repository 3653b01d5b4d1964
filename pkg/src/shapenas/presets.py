"""Bundled configurations.

``desk``: trains end to end on one CPU in minutes and is the configuration
the acceptance suite runs. ``paper_scale``: the full-size BERT-base-like
setup (12 layers, width 768, 7 widths, 175K steps at batch 2048); shipped
for documentation and config-file generation only, it is not runnable at
desk scale.
"""

from .supernet import BackboneConfig
from .training import TrainingConfig


def desk_backbone():
    return BackboneConfig(
        num_layers=4,
        d_model=64,
        d_attn=64,
        d_ff=256,
        heads=4,
        vocab_size=2000,
        max_seq_len=64,
        allowed_dims=(16, 32, 48, 64),
    )


def desk_training(seed=0):
    return TrainingConfig(
        steps=2000,
        batch_size=16,
        seq_len=64,
        peak_lr=1e-3,
        warmup_steps=100,
        weight_decay=0.01,
        adam_eps=1e-6,
        sampler="sandwich",
        shapes_per_step=4,
        seed=seed,
        eval_interval=200,
        eval_batches=12,
    )


def paper_scale_backbone():
    return BackboneConfig(
        num_layers=12,
        d_model=768,
        d_attn=768,
        d_ff=3072,
        heads=12,
        vocab_size=28996,
        max_seq_len=128,
        allowed_dims=(120, 240, 360, 480, 540, 600, 768),
    )


def paper_scale_training(seed=0):
    return TrainingConfig(
        steps=175_000,
        batch_size=2048,
        seq_len=128,
        peak_lr=2e-5,
        warmup_steps=10_000,
        weight_decay=0.01,
        adam_eps=1e-6,
        sampler="sandwich",
        shapes_per_step=4,
        seed=seed,
        eval_interval=5000,
        eval_batches=64,
    )


PRESETS = {
    "desk": (desk_backbone, desk_training),
    "paper_scale": (paper_scale_backbone, paper_scale_training),
}
