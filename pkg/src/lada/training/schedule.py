from __future__ import annotations

from lada.training.config import TrainConfig


def lr_schedule(step: int, cfg: TrainConfig, steps_per_epoch: int) -> float:
    """Linear warmup from 0, constant, then one step decay at ``cfg.decay_epoch``."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warmup = cfg.warmup_epochs * steps_per_epoch
    lr = cfg.base_lr if step >= warmup else cfg.base_lr * step / warmup
    if step >= cfg.decay_epoch * steps_per_epoch:
        lr *= cfg.decay_factor
    return lr
