"""Adam and the warm-up + cosine learning-rate schedule."""
from __future__ import annotations

import math
from typing import Iterable

import numpy as np

from steerer.tensor import Parameter


def adam_step(params: Iterable[Parameter], lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> None:
    """Bias-corrected Adam update in place, then clear every gradient.

    Parameters whose ``grad`` is ``None`` are treated as having zero gradient:
    their moments decay but, with zero first moment, they do not move.
    """
    if not lr > 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    for p in params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.step += 1
        p.m *= beta1
        p.m += (1.0 - beta1) * g
        p.v *= beta2
        p.v += (1.0 - beta2) * (g * g)
        m_hat = p.m / (1.0 - beta1 ** p.step)
        v_hat = p.v / (1.0 - beta2 ** p.step)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        p.grad = None


def zero_grad(params: Iterable[Parameter]) -> None:
    for p in params:
        p.grad = None


def warmup_cosine_lr(step: int, steps_per_epoch: int, peak_lr: float, warmup_epochs: float,
                     total_epochs: int) -> float:
    """Linear ramp from 0 to ``peak_lr`` over the warm-up, cosine decay to 0 after.

    ``step`` counts optimizer steps from 0; step 0 has learning rate 0.
    """
    warm = warmup_epochs * steps_per_epoch
    total = total_epochs * steps_per_epoch
    if step < warm:
        return peak_lr * step / warm
    if total <= warm:
        return peak_lr
    progress = min((step - warm) / (total - warm), 1.0)
    return 0.5 * peak_lr * (1.0 + math.cos(math.pi * progress))
