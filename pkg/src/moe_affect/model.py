"""Routed mixture-of-experts classifier over per-branch embeddings.

Each branch m gets an input projection, a transformer block and a softmax
head; a fused expert classifies the concatenated branch features; a router
maps the same concatenation to M+1 mixing weights, and the aggregated class
distribution is the router-weighted sum of the M+1 expert distributions.
"""
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import BranchSpec
from .nn import layers as L
from .nn.params import ParamStore
from .taxonomy import N_CLASSES

FUSED_KINDS = ("concat_linear", "low_rank_fusion")


class ConfigError(ValueError):
    pass


@dataclass
class MoeConfig:
    branches: list
    d_model: int = 32
    n_heads: int = 4
    n_classes: int = N_CLASSES
    fused_head: str = "concat_linear"
    rank: int = 4
    fusion_hidden: int = 0  # 0 -> d_model
    positional_encoding: bool = False

    def __post_init__(self):
        self.branches = [b if isinstance(b, BranchSpec) else BranchSpec.from_dict(b) for b in self.branches]
        if not self.branches:
            raise ConfigError("at least one branch is required")
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate branch names: {names}")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"n_classes is fixed at {N_CLASSES}")
        if self.d_model < 1 or self.n_heads < 1 or self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} must be a positive multiple of n_heads={self.n_heads}")
        if self.fused_head not in FUSED_KINDS:
            raise ConfigError(f"fused_head must be one of {FUSED_KINDS}")
        if self.fused_head == "low_rank_fusion" and self.rank < 1:
            raise ConfigError(f"low_rank_fusion needs rank >= 1, got {self.rank}")

    @property
    def n_branches(self):
        return len(self.branches)

    @property
    def n_experts(self):
        return len(self.branches) + 1

    @property
    def hidden(self):
        return self.fusion_hidden or self.d_model

    def to_dict(self):
        out = asdict(self)
        out["branches"] = [b.to_dict() for b in self.branches]
        return out

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_shapes(config):
    """Ordered parameter names and shapes; a pure function of the config."""
    d, K = config.d_model, config.n_classes
    M = config.n_branches
    shapes = {}
    for b in config.branches:
        pre = f"branch.{b.name}."
        shapes[pre + "proj.w"] = (b.dim, d)
        shapes[pre + "proj.b"] = (d,)
        if b.kind == "sequence":
            shapes[pre + "cls"] = (1, d)
        for k, s in L.block_param_shapes(d).items():
            shapes[pre + "block." + k] = s
        shapes[pre + "head.w"] = (d, K)
        shapes[pre + "head.b"] = (K,)
    shapes["router.w"] = (M * d, M + 1)
    shapes["router.b"] = (M + 1,)
    if config.fused_head == "concat_linear":
        shapes["fused.w"] = (M * d, K)
        shapes["fused.b"] = (K,)
    else:
        h = config.hidden
        for b in config.branches:
            shapes[f"fused.factor.{b.name}"] = (config.rank, d + 1, h)
        shapes["fused.bias"] = (h,)
        shapes["fused.out.w"] = (h, K)
        shapes["fused.out.b"] = (K,)
    return shapes


def _init_value(name, shape, rng):
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "cls":
        return rng.normal(0.0, 0.02, size=shape)
    if leaf == "g":
        return np.ones(shape)
    if len(shape) == 1:
        return np.zeros(shape)
    fan_in, fan_out = shape[-2], shape[-1]
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def init_params(config, seed=0, dtype=np.float32):
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    for name, shape in param_shapes(config).items():
        store.add(name, _init_value(name, shape, rng))
    return store


@dataclass
class MoeOutput:
    features: list
    expert_probs: np.ndarray  # (M+1, n, K); last slot is the fused expert
    weights: np.ndarray  # (n, M+1)
    aggregated: np.ndarray  # (n, K)
    cache: dict = field(default=None, repr=False)


def _pad(seqs, dim, dtype):
    lengths = np.array([s.shape[0] for s in seqs], dtype=np.int64)
    if (lengths < 1).any():
        raise L.ShapeError(f"empty sequence at record {int(np.argmax(lengths < 1))}")
    n, T = len(seqs), int(lengths.max()) if len(seqs) else 1
    out = np.zeros((n, T, dim), dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, :s.shape[0]] = s
    return out, lengths


class MoeModel:
    """Parameters plus forward/backward for the routed classifier."""

    def __init__(self, config, store=None, seed=0, dtype=np.float32):
        self.config = config
        self.store = init_params(config, seed, dtype) if store is None else store
        expected = param_shapes(config)
        got = {k: v.shape for k, v in self.store.params.items()}
        if list(got) != list(expected) or any(tuple(got[k]) != tuple(v) for k, v in expected.items()):
            raise ConfigError("parameter store does not match the model configuration")

    @property
    def dtype(self):
        return self.store.dtype

    def astype(self, dtype):
        return MoeModel(self.config, self.store.copy(dtype))

    def copy(self):
        return self.astype(self.dtype)

    # --- branch experts -------------------------------------------------

    def _block(self, tokens, prefix, mask):
        p, _ = self.store.view(prefix + "block.")
        return L.block_forward(tokens, p, self.config.n_heads, mask)

    def temporal_forward(self, seqs, branch):
        """CLS-token encoding of ragged frame sequences -> (n, d) features."""
        spec = self._spec(branch)
        pre = f"branch.{spec.name}."
        frames, lengths = _pad(seqs, spec.dim, self.dtype)
        n, T, _ = frames.shape
        z, c_proj = L.linear_forward(frames, self.store[pre + "proj.w"], self.store[pre + "proj.b"])
        cls = np.broadcast_to(self.store[pre + "cls"][None], (n, 1, self.config.d_model))
        tokens = np.concatenate([cls, z], axis=1)
        if self.config.positional_encoding:
            tokens = tokens + L.sinusoidal_positions(T + 1, self.config.d_model, self.dtype)[None]
        mask = np.concatenate([np.ones((n, 1), bool), np.arange(T)[None, :] < lengths[:, None]], axis=1)
        out, c_block = self._block(tokens, pre, mask)
        return out[:, 0, :], ("sequence", c_proj, c_block, out.shape, mask)

    def vector_forward(self, x, branch):
        spec = self._spec(branch)
        pre = f"branch.{spec.name}."
        z, c_proj = L.linear_forward(x[:, None, :], self.store[pre + "proj.w"], self.store[pre + "proj.b"])
        out, c_block = self._block(z, pre, None)
        return out[:, 0, :], ("vector", c_proj, c_block, out.shape, None)

    def branch_forward(self, inputs, branch):
        """Feature (n, d) and class probabilities (n, K) of one branch expert."""
        spec = self._spec(branch)
        pre = f"branch.{spec.name}."
        if spec.kind == "vector":
            x = np.asarray(inputs, dtype=self.dtype)
            if x.ndim != 2 or x.shape[1] != spec.dim:
                raise L.ShapeError(f"branch {spec.name!r}: expected (n, {spec.dim}) input, got {x.shape}")
            feat, c_feat = self.vector_forward(x, spec)
        else:
            for i, s in enumerate(inputs):
                if np.ndim(s) != 2 or np.shape(s)[1] != spec.dim:
                    raise L.ShapeError(f"branch {spec.name!r}: record {i} has shape {np.shape(s)}, want (T, {spec.dim})")
            feat, c_feat = self.temporal_forward(inputs, spec)
        logits, c_head = L.linear_forward(feat, self.store[pre + "head.w"], self.store[pre + "head.b"])
        probs = L.softmax(logits)
        return feat, probs, (c_feat, c_head, probs)

    def _branch_backward(self, spec, dfeat, dprobs, cache):
        pre = f"branch.{spec.name}."
        grads = self.store.grads
        c_feat, c_head, probs = cache
        dlogits = L.softmax_backward(dprobs, probs)
        dfeat_h, dw, db = L.linear_backward(dlogits, c_head)
        grads[pre + "head.w"] += dw
        grads[pre + "head.b"] += db
        dfeat = dfeat + dfeat_h
        kind, c_proj, c_block, out_shape, _ = c_feat
        dout = np.zeros(out_shape, dtype=self.dtype)
        dout[:, 0, :] = dfeat
        _, g = self.store.view(pre + "block.")
        dtokens = L.block_backward(dout, c_block, g)
        if kind == "sequence":
            grads[pre + "cls"] += dtokens[:, 0, :].sum(axis=0, keepdims=True)
            dz = dtokens[:, 1:, :]
        else:
            dz = dtokens
        _, dw, db = L.linear_backward(dz, c_proj)
        grads[pre + "proj.w"] += dw
        grads[pre + "proj.b"] += db

    # --- router and fused expert ----------------------------------------

    def router_forward(self, features):
        if len(features) != self.config.n_branches:
            raise L.ShapeError(f"router expects {self.config.n_branches} features, got {len(features)}")
        x, widths = L.concat_forward(features)
        logits, c_lin = L.linear_forward(x, self.store["router.w"], self.store["router.b"])
        w = L.softmax(logits)
        return w, (widths, c_lin, w)

    def _router_backward(self, dw, cache):
        widths, c_lin, w = cache
        dlogits = L.softmax_backward(dw, w)
        dx, dW, db = L.linear_backward(dlogits, c_lin)
        self.store.grads["router.w"] += dW
        self.store.grads["router.b"] += db
        return L.concat_backward(dx, widths)

    def fused_forward(self, features):
        cfg = self.config
        if len(features) != cfg.n_branches:
            raise L.ShapeError(f"fused expert expects {cfg.n_branches} features, got {len(features)}")
        if cfg.fused_head == "concat_linear":
            x, widths = L.concat_forward(features)
            logits, c_lin = L.linear_forward(x, self.store["fused.w"], self.store["fused.b"])
            probs = L.softmax(logits)
            return probs, ("concat", widths, c_lin, probs)
        n = features[0].shape[0]
        ones = np.ones((n, 1), dtype=self.dtype)
        xa = [np.concatenate([ones, f], axis=1) for f in features]
        factors = [self.store[f"fused.factor.{b.name}"] for b in cfg.branches]
        zs = [np.einsum("ni,rih->rnh", x, F) for x, F in zip(xa, factors)]
        prod = zs[0]
        for z in zs[1:]:
            prod = prod * z
        fused = prod.sum(axis=0) + self.store["fused.bias"]
        logits, c_out = L.linear_forward(fused, self.store["fused.out.w"], self.store["fused.out.b"])
        probs = L.softmax(logits)
        return probs, ("low_rank", xa, zs, c_out, probs)

    def _fused_backward(self, dprobs, cache):
        grads = self.store.grads
        if cache[0] == "concat":
            _, widths, c_lin, probs = cache
            dlogits = L.softmax_backward(dprobs, probs)
            dx, dW, db = L.linear_backward(dlogits, c_lin)
            grads["fused.w"] += dW
            grads["fused.b"] += db
            return L.concat_backward(dx, widths)
        _, xa, zs, c_out, probs = cache
        dlogits = L.softmax_backward(dprobs, probs)
        dfused, dW, db = L.linear_backward(dlogits, c_out)
        grads["fused.out.w"] += dW
        grads["fused.out.b"] += db
        grads["fused.bias"] += dfused.sum(axis=0)
        dfeat = []
        for m, b in enumerate(self.config.branches):
            others = np.ones_like(zs[0])
            for j, z in enumerate(zs):
                if j != m:
                    others = others * z
            dz = dfused[None] * others
            F = self.store[f"fused.factor.{b.name}"]
            grads[f"fused.factor.{b.name}"] += np.einsum("ni,rnh->rih", xa[m], dz)
            dfeat.append(np.einsum("rnh,rih->ni", dz, F)[:, 1:])
        return dfeat

    # --- full model -----------------------------------------------------

    def forward(self, batch, router_weights=None):
        """Run every expert, the router and the aggregation.

        ``batch`` maps branch name to its input (matrix or list of sequences),
        e.g. ``bundle.data``. ``router_weights`` (n, M+1) overrides the router.
        """
        cfg = self.config
        feats, branch_probs, caches = [], [], []
        for b in cfg.branches:
            if b.name not in batch:
                raise L.ShapeError(f"batch is missing branch {b.name!r}")
            f, p, c = self.branch_forward(batch[b.name], b)
            feats.append(f)
            branch_probs.append(p)
            caches.append(c)
        fused_p, c_fused = self.fused_forward(feats)
        if router_weights is None:
            w, c_router = self.router_forward(feats)
        else:
            w, c_router = np.asarray(router_weights, dtype=self.dtype), None
            if w.shape != (feats[0].shape[0], cfg.n_experts):
                raise L.ShapeError(f"router weights must have shape (n, {cfg.n_experts})")
        experts = np.stack(branch_probs + [fused_p])
        agg = np.einsum("ne,enk->nk", w, experts)
        cache = {"branches": caches, "fused": c_fused, "router": c_router}
        return MoeOutput(feats, experts, w, agg, cache)

    def backward(self, out, dagg):
        """Accumulate parameter gradients for an upstream gradient on the aggregated probabilities."""
        cfg = self.config
        dagg = np.asarray(dagg, dtype=self.dtype)
        dw = np.einsum("nk,enk->ne", dagg, out.expert_probs)
        dexperts = out.weights.T[:, :, None] * dagg[None]
        dfeat = [np.zeros_like(f) for f in out.features]
        if out.cache["router"] is not None:
            for m, d in enumerate(self._router_backward(dw, out.cache["router"])):
                dfeat[m] += d
        for m, d in enumerate(self._fused_backward(dexperts[-1], out.cache["fused"])):
            dfeat[m] += d
        for m, b in enumerate(cfg.branches):
            self._branch_backward(b, dfeat[m], dexperts[m], out.cache["branches"][m])

    def predict_proba(self, batch, batch_size=1024):
        n = _batch_len(batch, self.config.branches[0])
        if n == 0:
            return np.zeros((0, self.config.n_classes), dtype=self.dtype)
        parts = []
        for start in range(0, n, batch_size):
            sl = slice(start, start + batch_size)
            sub = {k: v[sl] for k, v in batch.items()}
            parts.append(self.forward(sub).aggregated)
        return np.concatenate(parts)

    def _spec(self, branch):
        if isinstance(branch, BranchSpec):
            return branch
        if isinstance(branch, (int, np.integer)):
            return self.config.branches[int(branch)]
        for b in self.config.branches:
            if b.name == branch:
                return b
        raise KeyError(f"unknown branch {branch!r}")

    # --- persistence ----------------------------------------------------

    def save(self, path):
        path = Path(path)
        self.store.save(path)
        path.with_suffix(".json").write_text(json.dumps(self.config.to_dict(), indent=2) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        path = Path(path)
        config = MoeConfig.from_dict(json.loads(path.with_suffix(".json").read_text(encoding="utf-8")))
        return cls(config, ParamStore.load(path))


def _batch_len(batch, spec):
    return len(batch[spec.name])


def check_branches_match(bundle, config):
    if tuple(bundle.branches) != tuple(config.branches):
        raise ConfigError(f"bundle branches {[b.to_dict() for b in bundle.branches]} do not match "
                          f"model branches {[b.to_dict() for b in config.branches]}")
