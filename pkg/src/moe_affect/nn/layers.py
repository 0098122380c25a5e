"""Forward/backward rules for the fixed layer set used by the MoE model.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
consumes the upstream gradient plus that cache. Parameter gradients are
returned (or accumulated into a ``grads`` mapping for composite blocks);
nothing here holds state.
"""
import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class ShapeError(ValueError):
    pass


def linear_forward(x, W, b):
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise ShapeError(f"linear: input {x.shape} incompatible with W {W.shape}, b {b.shape}")
    return x @ W + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dW = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = dy @ W.T
    return dx, dW, db


def softmax(x, axis=-1):
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis=-1):
    return p * (dp - (dp * p).sum(axis=axis, keepdims=True))


def layer_norm_forward(x, gamma, beta, eps=LN_EPS):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    xhat = xc * inv
    return xhat * gamma + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache):
    xhat, inv, gamma = cache
    d = xhat.shape[-1]
    flat = dy.reshape(-1, d)
    dgamma = (flat * xhat.reshape(-1, d)).sum(axis=0)
    dbeta = flat.sum(axis=0)
    dxhat = dy * gamma
    dx = inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def gelu_forward(x):
    # tanh approximation
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(0.044715)
    t = np.tanh(c * (x + a * x ** 3))
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    c = x.dtype.type(_GELU_C)
    a = x.dtype.type(0.044715)
    dt = (1.0 - t * t) * c * (1.0 + 3.0 * a * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * dt)


def concat_forward(features):
    if not features:
        raise ShapeError("concat: no inputs")
    n = features[0].shape[0]
    for f in features:
        if f.shape[0] != n:
            raise ShapeError(f"concat: row counts differ ({n} vs {f.shape[0]})")
    widths = [f.shape[1] for f in features]
    return np.concatenate(features, axis=1), widths


def concat_backward(dy, widths):
    cuts = np.cumsum(widths)[:-1]
    return np.split(dy, cuts, axis=1)


def block_param_shapes(d):
    """Names and shapes of one pre-norm transformer block of width ``d``."""
    h = 4 * d
    return {
        "ln1.g": (d,), "ln1.b": (d,),
        "attn.wq": (d, d), "attn.bq": (d,),
        "attn.wk": (d, d), "attn.bk": (d,),
        "attn.wv": (d, d), "attn.bv": (d,),
        "attn.wo": (d, d), "attn.bo": (d,),
        "ln2.g": (d,), "ln2.b": (d,),
        "ffn.w1": (d, h), "ffn.b1": (h,),
        "ffn.w2": (h, d), "ffn.b2": (d,),
    }


def attention_forward(x, p, n_heads, mask=None):
    """Multi-head scaled dot-product self-attention.

    x: (B, S, d); p: mapping with attn.{wq,bq,wk,bk,wv,bv,wo,bo};
    mask: optional (B, S) bool of valid key positions.
    """
    B, S, d = x.shape
    if d % n_heads:
        raise ShapeError(f"width {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    scale = x.dtype.type(1.0 / math.sqrt(dh))

    q, cq = linear_forward(x, p["attn.wq"], p["attn.bq"])
    k, ck = linear_forward(x, p["attn.wk"], p["attn.bk"])
    v, cv = linear_forward(x, p["attn.wv"], p["attn.bv"])

    def heads(t):
        return t.reshape(B, S, n_heads, dh).transpose(0, 2, 1, 3)

    qh, kh, vh = heads(q), heads(k), heads(v)
    scores = (qh @ kh.transpose(0, 1, 3, 2)) * scale
    if mask is not None:
        scores = np.where(mask[:, None, None, :], scores, -np.inf)
    att = softmax(scores, axis=-1)
    ctx = (att @ vh).transpose(0, 2, 1, 3).reshape(B, S, d)
    out, co = linear_forward(ctx, p["attn.wo"], p["attn.bo"])
    return out, (cq, ck, cv, co, qh, kh, vh, att, scale, n_heads)


def attention_backward(dout, cache, grads):
    cq, ck, cv, co, qh, kh, vh, att, scale, n_heads = cache
    B, _, S, dh = qh.shape
    d = n_heads * dh

    dctx, dwo, dbo = linear_backward(dout, co)
    grads["attn.wo"] += dwo
    grads["attn.bo"] += dbo
    dctx_h = dctx.reshape(B, S, n_heads, dh).transpose(0, 2, 1, 3)
    datt = dctx_h @ vh.transpose(0, 1, 3, 2)
    dvh = att.transpose(0, 1, 3, 2) @ dctx_h
    dscores = softmax_backward(datt, att) * scale
    dqh = dscores @ kh
    dkh = dscores.transpose(0, 1, 3, 2) @ qh

    def merge(t):
        return t.transpose(0, 2, 1, 3).reshape(B, S, d)

    dx = 0
    for name, dh_, c in (("q", dqh, cq), ("k", dkh, ck), ("v", dvh, cv)):
        dxi, dw, db = linear_backward(merge(dh_), c)
        grads[f"attn.w{name}"] += dw
        grads[f"attn.b{name}"] += db
        dx = dx + dxi
    return dx


def block_forward(x, p, n_heads, mask=None):
    """Pre-norm block: x + MHA(LN(x)), then h + FFN(LN(h)) with a 4d GELU hidden layer."""
    a_in, c_ln1 = layer_norm_forward(x, p["ln1.g"], p["ln1.b"])
    a_out, c_att = attention_forward(a_in, p, n_heads, mask)
    h = x + a_out
    f_in, c_ln2 = layer_norm_forward(h, p["ln2.g"], p["ln2.b"])
    z1, c_l1 = linear_forward(f_in, p["ffn.w1"], p["ffn.b1"])
    g, c_gelu = gelu_forward(z1)
    z2, c_l2 = linear_forward(g, p["ffn.w2"], p["ffn.b2"])
    return h + z2, (c_ln1, c_att, c_ln2, c_l1, c_gelu, c_l2)


def block_backward(dy, cache, grads):
    c_ln1, c_att, c_ln2, c_l1, c_gelu, c_l2 = cache
    dg, dw2, db2 = linear_backward(dy, c_l2)
    grads["ffn.w2"] += dw2
    grads["ffn.b2"] += db2
    dz1 = gelu_backward(dg, c_gelu)
    df_in, dw1, db1 = linear_backward(dz1, c_l1)
    grads["ffn.w1"] += dw1
    grads["ffn.b1"] += db1
    dh_ln, dg2, db2_ = layer_norm_backward(df_in, c_ln2)
    grads["ln2.g"] += dg2
    grads["ln2.b"] += db2_
    dh = dy + dh_ln
    da_in = attention_backward(dh, c_att, grads)
    dx_ln, dg1, db1_ = layer_norm_backward(da_in, c_ln1)
    grads["ln1.g"] += dg1
    grads["ln1.b"] += db1_
    return dh + dx_ln


def sinusoidal_positions(length, d, dtype=np.float32):
    pos = np.arange(length, dtype=np.float64)[:, None]
    i = np.arange(d, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    pe = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return pe.astype(dtype)
