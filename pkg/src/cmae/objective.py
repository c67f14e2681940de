"""Reconstruction targets, the partial masked MSE, learning-rate rules, and
AdamW.

The learning rate scales as gamma * base_lr * batch / (256 * p): linear
batch scaling times the prediction/mask ratio correction that matches the
gradient variance of partial reconstruction to full-mask training.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T


class NumericError(Exception):
    """Non-finite value encountered during training."""


@dataclass
class OptimConfig:
    base_lr: float = 1.5e-4
    batch_size: int = 256
    betas: tuple = (0.9, 0.95)
    weight_decay: float = 0.05
    warmup_epochs: int = 2
    total_epochs: int = 30
    eps: float = 1e-8

    def __post_init__(self):
        if self.warmup_epochs > self.total_epochs:
            raise ValueError(f"warmup {self.warmup_epochs} exceeds total epochs {self.total_epochs}")
        if min(self.base_lr, self.batch_size, self.total_epochs) <= 0:
            raise ValueError("base_lr, batch_size and total_epochs must be positive")


@dataclass
class PatchStats:
    mean: np.ndarray  # (..., T, 1)
    std: np.ndarray  # (..., T, 1), sqrt(var + eps)
    eps: float = 1e-6


def patch_normalize(targets, eps=1e-6):
    """Standardize each patch row; keep the stats so outputs can be mapped
    back to pixel space for display."""
    targets = np.asarray(targets)
    mean = targets.mean(axis=-1, keepdims=True)
    var = targets.var(axis=-1, keepdims=True)
    std = np.sqrt(var + eps)
    return (targets - mean) / std, PatchStats(mean=mean, std=std, eps=eps)


def patch_denormalize(normalized, stats):
    return normalized * stats.std + stats.mean


def masked_mse_loss(pred, targets_norm, plans):
    """Mean squared error over the predicted rows and their pixel channels.
    ``pred`` rows must align with each plan's predicted_idx; visible rows
    never contribute."""
    idx = np.stack([p.predicted_idx for p in plans], axis=0)  # (B, P)
    if pred.shape[:2] != idx.shape:
        raise ValueError(f"prediction rows {pred.shape[:2]} misaligned with predicted sets {idx.shape}")
    tgt = np.take_along_axis(np.asarray(targets_norm), idx[:, :, None], axis=1)
    diff = pred - T.Tensor(tgt.astype(pred.dtype))
    return T.reduce_mean(T.mul(diff, diff))


def scaled_lr(cfg, p, gamma):
    """gamma * base_lr * batch / (256 * p), factored so the neutral point
    (gamma = p, batch = 256) returns base_lr bit-exactly."""
    if not (0.0 < gamma <= p):
        raise ValueError(f"need 0 < gamma <= p, got gamma={gamma}, p={p}")
    return cfg.base_lr * (gamma / p) * (cfg.batch_size / 256.0)


def cosine_warmup_lr(step, cfg, steps_per_epoch, peak_lr):
    """Linear ramp from 0 over the warmup epochs, then half-cosine decay to
    0 at the end of training."""
    warmup_steps = cfg.warmup_epochs * steps_per_epoch
    total_steps = cfg.total_epochs * steps_per_epoch
    if step < warmup_steps:
        return peak_lr * step / max(1, warmup_steps)
    span = max(1, total_steps - warmup_steps)
    progress = (step - warmup_steps) / span
    return peak_lr * 0.5 * (1.0 + np.cos(np.pi * min(1.0, progress)))


def default_no_decay(name, param):
    """MAE-style exclusions: tokens, position tables, and every 1-d
    parameter (biases, norm gains) skip weight decay."""
    return param.data.ndim <= 1 or name.endswith(("cls_token", "mask_token", "pos_table"))


class AdamW:
    """Decoupled weight decay Adam with bias-corrected moments."""

    def __init__(self, params, cfg: OptimConfig, no_decay=default_no_decay):
        self.params = params
        self.cfg = cfg
        self.step_count = 0
        self.state = {
            name: (np.zeros_like(p.data), np.zeros_like(p.data)) for name, p in params.items()
        }
        self.decay_mask = {name: not no_decay(name, p) for name, p in params.items()}

    def step(self, lr):
        b1, b2 = self.cfg.betas
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - b1**t
        bc2 = 1.0 - b2**t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient in {name}")
            m, v = self.state[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            update = (m / bc1) / (np.sqrt(v / bc2) + self.cfg.eps)
            if self.decay_mask[name] and self.cfg.weight_decay:
                update = update + self.cfg.weight_decay * p.data
            p.data = p.data - lr * update

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()
