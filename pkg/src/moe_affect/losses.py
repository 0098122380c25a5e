import numpy as np

from .taxonomy import N_CLASSES

P_MIN = 1e-12


def _target_probs(probs, targets):
    targets = np.asarray(targets, dtype=np.int64)
    if targets.ndim != 1 or targets.shape[0] != probs.shape[0]:
        raise ValueError(f"targets shape {targets.shape} does not match probs {probs.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= probs.shape[1]):
        raise ValueError(f"target index out of range 0..{probs.shape[1] - 1}")
    rows = np.arange(probs.shape[0])
    return rows, targets, probs[rows, targets]


def _weights(targets, class_weights, dtype):
    if class_weights is None:
        return np.ones(targets.shape[0], dtype=dtype)
    cw = np.asarray(class_weights, dtype=dtype)
    if cw.shape != (N_CLASSES,):
        raise ValueError(f"class_weights must have {N_CLASSES} entries")
    return cw[targets]


def cross_entropy(probs, targets, class_weights=None):
    """Mean -ln p_target over the batch; returns (loss, dloss/dprobs)."""
    return focal_loss(probs, targets, 0.0, class_weights)


def focal_loss(probs, targets, gamma=2.0, class_weights=None):
    """Mean -(1 - p_t)^gamma ln p_t; returns (loss, dloss/dprobs).

    p_t is clamped below at 1e-12; the clamped region has zero gradient.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    probs = np.asarray(probs)
    rows, targets, pt = _target_probs(probs, targets)
    n = max(probs.shape[0], 1)
    w = _weights(targets, class_weights, probs.dtype)
    clamped = pt < P_MIN
    p = np.maximum(pt, probs.dtype.type(P_MIN))
    logp = np.log(p)
    grad = np.zeros_like(probs)
    if gamma == 0:
        per = -logp
        dp = -1.0 / p
    else:
        q = 1.0 - p
        mod = q ** gamma
        per = -mod * logp
        # d/dp of -(1-p)^g ln p = g (1-p)^(g-1) ln p - (1-p)^g / p
        with np.errstate(divide="ignore", invalid="ignore"):
            first = np.where(q > 0, gamma * q ** (gamma - 1) * logp, 0.0)
        dp = first - mod / p
    dp = np.where(clamped, 0.0, dp)
    loss = float((w * per).sum() / n)
    grad[rows, targets] = (w * dp / n).astype(probs.dtype)
    return loss, grad
