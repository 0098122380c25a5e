import math
from dataclasses import dataclass

import numpy as np


@dataclass
class AdamWConfig:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01


def cosine_lr(step, total_steps, lr0=1e-3, lr_end=1e-4):
    """Cosine annealing from ``lr0`` at step 0 to ``lr_end`` at ``total_steps``."""
    if total_steps < 1:
        raise ValueError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps}")
    # endpoints returned verbatim so they are exact
    if step == 0:
        return lr0
    if step == total_steps:
        return lr_end
    return lr_end + 0.5 * (lr0 - lr_end) * (1.0 + math.cos(math.pi * step / total_steps))


def adamw_step(store, lr, config=None):
    """One decoupled-weight-decay Adam update over every parameter; zeroes gradients after."""
    cfg = config or AdamWConfig()
    store.step += 1
    t = store.step
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    dt = store.dtype.type
    for name, p in store.params.items():
        g = store.grads[name]
        m, v = store.m[name], store.v[name]
        if cfg.weight_decay:
            p *= dt(1.0 - lr * cfg.weight_decay)
        m *= dt(cfg.beta1)
        m += dt(1.0 - cfg.beta1) * g
        v *= dt(cfg.beta2)
        v += dt(1.0 - cfg.beta2) * g * g
        p -= dt(lr) * (m / dt(bc1)) / (np.sqrt(v / dt(bc2)) + dt(cfg.eps))
    store.zero_grad()
