"""Finite-difference verification of every trainable layer and of the full MoE composite."""
import contextlib
import time

import numpy as np

from .data import BranchSpec
from .losses import cross_entropy, focal_loss
from .model import MoeConfig, MoeModel
from .nn import layers as L
from .nn.gradcheck import grad_check
from .nn.params import ParamStore

TOL64 = 1e-6
TOL32 = 1e-3
EPS = 1e-4


def _projection_loss(out, R):
    # scalar probe <out, R>; its gradient w.r.t. out is R
    return float((out * R).sum()), R.astype(out.dtype)


def _layer_cases(rng):
    """(name, store, loss_and_grad) triples, one per layer rule."""
    cases = []

    s = ParamStore(np.float64)
    s.add("x", rng.normal(size=(5, 3)))
    s.add("W", rng.normal(size=(3, 2)))
    s.add("b", rng.normal(size=(2,)))
    R = rng.normal(size=(5, 2))

    def linear(st):
        y, c = L.linear_forward(st["x"], st["W"], st["b"])
        loss, dy = _projection_loss(y, R)
        dx, dW, db = L.linear_backward(dy, c)
        st.grads["x"] += dx
        st.grads["W"] += dW
        st.grads["b"] += db
        return loss
    cases.append(("linear", s, linear))

    s = ParamStore(np.float64)
    s.add("x", rng.normal(size=(4, 6)))
    R6 = rng.normal(size=(4, 6))

    def softmax(st):
        p = L.softmax(st["x"])
        loss, dp = _projection_loss(p, R6)
        st.grads["x"] += L.softmax_backward(dp, p)
        return loss
    cases.append(("softmax", s, softmax))

    s = ParamStore(np.float64)
    s.add("x", rng.normal(size=(3, 4, 8)))
    s.add("g", 1.0 + 0.3 * rng.normal(size=(8,)))
    s.add("b", 0.3 * rng.normal(size=(8,)))
    R8 = rng.normal(size=(3, 4, 8))

    def layer_norm(st):
        y, c = L.layer_norm_forward(st["x"], st["g"], st["b"])
        loss, dy = _projection_loss(y, R8)
        dx, dg, db = L.layer_norm_backward(dy, c)
        st.grads["x"] += dx
        st.grads["g"] += dg
        st.grads["b"] += db
        return loss
    cases.append(("layer_norm", s, layer_norm))

    s = ParamStore(np.float64)
    s.add("x", 2.0 * rng.normal(size=(4, 5)))
    R5 = rng.normal(size=(4, 5))

    def gelu(st):
        y, c = L.gelu_forward(st["x"])
        loss, dy = _projection_loss(y, R5)
        st.grads["x"] += L.gelu_backward(dy, c)
        return loss
    cases.append(("gelu", s, gelu))

    s = ParamStore(np.float64)
    for i, w in enumerate((2, 3, 1)):
        s.add(f"x{i}", rng.normal(size=(4, w)))
    Rc = rng.normal(size=(4, 6))

    def concat(st):
        y, widths = L.concat_forward([st["x0"], st["x1"], st["x2"]])
        loss, dy = _projection_loss(y, Rc)
        for i, d in enumerate(L.concat_backward(dy, widths)):
            st.grads[f"x{i}"] += d
        return loss
    cases.append(("concat", s, concat))

    d = 8
    s = ParamStore(np.float64)
    for k, shape in L.block_param_shapes(d).items():
        limit = np.sqrt(6.0 / sum(shape)) if len(shape) == 2 else 0.3
        base = 1.0 if k.endswith(".g") else 0.0
        s.add("blk." + k, base + rng.uniform(-limit, limit, size=shape))
    s.add("x", rng.normal(size=(1, 3, d)))
    Rb = rng.normal(size=(1, 3, d))

    def block(st):
        p, g = st.view("blk.")
        y, c = L.block_forward(st["x"], p, 2)
        loss, dy = _projection_loss(y, Rb)
        st.grads["x"] += L.block_backward(dy, c, g)
        return loss
    cases.append(("attention_block", s, block))
    return cases


def micro_moe(fused_head="concat_linear", seed=0, n=4):
    """A small 4-branch model (one AU-style sequence branch) plus a batch and targets."""
    rng = np.random.default_rng([seed, 7])
    branches = [BranchSpec("a", "vector", 5), BranchSpec("au", "sequence", 7),
                BranchSpec("c", "vector", 3), BranchSpec("d", "vector", 4)]
    cfg = MoeConfig(branches, d_model=8, n_heads=2, fused_head=fused_head, rank=3)
    model = MoeModel(cfg, seed=seed, dtype=np.float64)
    # unit-scale CLS tokens keep layer norm away from its near-singular region
    model.store.params["branch.au.cls"][...] = rng.normal(size=(1, 8))
    lengths = [1, 3, 2, 5, 4, 2, 6, 1][:n]
    batch = {"a": rng.normal(size=(n, 5)), "au": [rng.normal(size=(t, 7)) for t in lengths],
             "c": rng.normal(size=(n, 3)), "d": rng.normal(size=(n, 4))}
    y = rng.integers(0, 6, size=n)
    return model, batch, y


def moe_loss_fn(model, batch, y, loss="ce", gamma=2.0):
    cfg = model.config

    def f(st):
        m = MoeModel(cfg, st)
        b = {k: (np.asarray(v, st.dtype) if not isinstance(v, list) else [np.asarray(s, st.dtype) for s in v])
             for k, v in batch.items()}
        out = m.forward(b)
        if loss == "ce":
            value, dagg = cross_entropy(out.aggregated, y)
        else:
            value, dagg = focal_loss(out.aggregated, y, gamma)
        m.backward(out, dagg)
        return value
    return f


@contextlib.contextmanager
def inject_fault(rule="softmax_backward"):
    """Temporarily replace one backward rule with a wrong one."""
    original = getattr(L, rule)
    if rule == "softmax_backward":
        def broken(dp, p, axis=-1):
            return p * dp  # drops the normalization term
    elif rule == "gelu_backward":
        def broken(dy, cache):
            return dy * 0.5 * (1.0 + cache[1])  # drops the tanh-derivative term
    elif rule == "layer_norm_backward":
        def broken(dy, cache):
            dx, dg, db = original(dy, cache)
            return dy * cache[1], dg, db  # ignores the mean/variance coupling
    else:
        raise ValueError(f"no fault defined for {rule!r}")
    setattr(L, rule, broken)
    try:
        yield
    finally:
        setattr(L, rule, original)


def run_suite(seed=0, max_coords=300, fault=None, log=print):
    """Check every layer rule and the composite at 64-bit and 32-bit precision.

    Returns a list of ``(name, precision, GradCheckReport)``.
    """
    rng = np.random.default_rng(seed)
    results = []
    cases = _layer_cases(rng)
    for fused in ("concat_linear", "low_rank_fusion"):
        model, batch, y = micro_moe(fused, seed)
        cases.append((f"moe[{fused}]", model.store, moe_loss_fn(model, batch, y)))
    model, batch, y = micro_moe("concat_linear", seed)
    cases.append(("moe[focal]", model.store, moe_loss_fn(model, batch, y, loss="focal")))

    ctx = inject_fault(fault) if fault else contextlib.nullcontext()
    with ctx:
        for name, store, fn in cases:
            t0 = time.perf_counter()
            r64 = grad_check(fn, store, eps=EPS, tol=TOL64, max_coords=max_coords, seed=seed)
            r32 = grad_check(fn, store, eps=EPS, tol=TOL32, max_coords=max_coords, seed=seed,
                             analytic_store=store.copy(np.float32))
            results.append((name, "float64", r64))
            results.append((name, "float32", r32))
            if log:
                log(f"{name:<22} f64 {r64}")
                log(f"{name:<22} f32 {r32}  ({time.perf_counter() - t0:.2f}s)")
    return results
