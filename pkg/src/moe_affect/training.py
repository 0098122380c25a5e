import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .data import DataFormatError, PredictionSet
from .losses import cross_entropy, focal_loss
from .metrics import compute_metrics
from .model import ConfigError, MoeModel, check_branches_match
from .optim import AdamWConfig, adamw_step, cosine_lr

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "focal")
FINETUNE_LR_DIVISOR = 10


class UnlabeledDataError(DataFormatError):
    pass


@dataclass
class TrainConfig:
    lr0: float = 1e-3
    lr_end: float = 1e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 256
    epochs: int = 10
    loss: str = "ce"
    focal_gamma: float = 2.0
    class_weights: list = None
    seed: int = 42

    def __post_init__(self):
        if not 0 < self.lr_end <= self.lr0:
            raise ConfigError(f"need 0 < lr_end <= lr0, got lr0={self.lr0}, lr_end={self.lr_end}")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.loss not in LOSS_KINDS:
            raise ConfigError(f"loss must be one of {LOSS_KINDS}")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")

    @property
    def adamw(self):
        return AdamWConfig(self.beta1, self.beta2, self.adam_eps, self.weight_decay)

    def loss_fn(self):
        if self.loss == "ce":
            return lambda p, y: cross_entropy(p, y, self.class_weights)
        return lambda p, y: focal_loss(p, y, self.focal_gamma, self.class_weights)

    def to_dict(self):
        return asdict(self)


@dataclass
class TrainLog:
    records: list = field(default_factory=list)
    lr_trace: list = field(default_factory=list)

    def extend(self, other):
        self.records.extend(other.records)
        self.lr_trace.extend(other.lr_trace)

    def losses(self, stage=None):
        return [r["loss"] for r in self.records if stage is None or r["stage"] == stage]


def _gather(bundle, positions):
    batch = {}
    for b in bundle.branches:
        src = bundle.data[b.name]
        batch[b.name] = src[positions] if b.kind == "vector" else [src[p] for p in positions]
    return batch


def _val_metrics(model, bundle):
    probs = model.predict_proba(bundle.data)
    rep = compute_metrics(np.argmax(probs, axis=1), bundle.label_indices())
    return {"accuracy": rep.accuracy, "macro_f1": rep.macro_f1, "weighted_f1": rep.weighted_f1}


def train_supervised(bundle, config, moe_config, init_model=None, val_bundle=None,
                     stage="train", select_best=False):
    """Mini-batch AdamW training on the aggregated MoE distribution.

    Starts from ``init_model`` parameters when given (optimizer moments always
    start at zero). With ``select_best`` and a validation bundle, the returned
    model is the epoch checkpoint with the highest validation weighted-F1.
    Returns ``(model, TrainLog)``.
    """
    if len(bundle) == 0:
        raise UnlabeledDataError("cannot train on an empty bundle")
    if not bundle.is_labeled:
        raise UnlabeledDataError(f"bundle has {len(bundle) - len(bundle.labels)} unlabeled samples")
    check_branches_match(bundle, moe_config)
    if val_bundle is not None:
        check_branches_match(val_bundle, moe_config)
        val_bundle.label_indices()

    model = MoeModel(moe_config, seed=config.seed) if init_model is None else init_model.copy()
    store = model.store
    y = bundle.label_indices()
    n = len(bundle)
    bs = min(config.batch_size, n)
    steps_per_epoch = -(-n // bs)
    total = config.epochs * steps_per_epoch
    loss_fn = config.loss_fn()
    adamw = config.adamw
    # shuffle in sorted-id space so results do not depend on bundle row order
    canonical = np.array(sorted(range(n), key=lambda i: bundle.ids[i]), dtype=np.int64)
    shuffle_rng = np.random.default_rng([config.seed, 1])

    out_log = TrainLog()
    best, best_score = None, -1.0
    step = 0
    store.zero_grad()
    for epoch in range(config.epochs):
        order = canonical[shuffle_rng.permutation(n)]
        epoch_lr = cosine_lr(step, total, config.lr0, config.lr_end)
        loss_sum = 0.0
        for start in range(0, n, bs):
            pos = order[start:start + bs]
            lr = cosine_lr(step, total, config.lr0, config.lr_end)
            out = model.forward(_gather(bundle, pos))
            loss, dagg = loss_fn(out.aggregated, y[pos])
            model.backward(out, dagg)
            adamw_step(store, lr, adamw)
            out_log.lr_trace.append(lr)
            loss_sum += loss * len(pos)
            step += 1
        rec = {"stage": stage, "epoch": epoch + 1, "step": step, "lr": epoch_lr,
               "loss": loss_sum / n, "optimizer_step": store.step}
        if val_bundle is not None and len(val_bundle):
            rec["val_metrics"] = _val_metrics(model, val_bundle)
            if select_best and rec["val_metrics"]["weighted_f1"] > best_score:
                best_score = rec["val_metrics"]["weighted_f1"]
                best = model.copy()
                rec["best"] = True
        out_log.records.append(rec)
        log.debug("%s epoch %d loss %.5f", stage, epoch + 1, rec["loss"])
    if select_best and best is not None:
        return best, out_log
    return model, out_log


def two_stage_train(pseudo_bundle, labeled_bundle, config, moe_config, val_bundle=None, select_best=False):
    """Pretrain on pseudo-labeled data, then fine-tune on clean labels at a tenth of the learning rate.

    The fine-tune stage uses a fresh cosine schedule and fresh AdamW moments.
    An empty pseudo bundle skips pretraining.
    """
    if tuple(pseudo_bundle.branches) != tuple(labeled_bundle.branches):
        raise ConfigError("pseudo and labeled bundles have different branch specs")
    full_log = TrainLog()
    init = None
    if len(pseudo_bundle):
        init, pre_log = train_supervised(pseudo_bundle, config, moe_config, stage="pretrain")
        full_log.extend(pre_log)
    model, ft_log = train_supervised(labeled_bundle, finetune_config(config), moe_config, init_model=init,
                                     val_bundle=val_bundle, stage="finetune", select_best=select_best)
    full_log.extend(ft_log)
    return model, full_log


def finetune_config(config):
    return replace(config, lr0=config.lr0 / FINETUNE_LR_DIVISOR, lr_end=config.lr_end / FINETUNE_LR_DIVISOR)


@dataclass
class FoldPlan:
    k: int
    folds: list  # [(train_ids, val_ids)]
    seed: int

    def validation_sets(self):
        return [v for _, v in self.folds]


def kfold_split(ids, k=5, seed=42):
    """Seeded shuffle, then contiguous partition; the first n % k folds get one extra sample."""
    ids = list(ids)
    n = len(ids)
    if k < 2:
        raise ValueError("k must be >= 2")
    if n < k:
        raise ValueError(f"need at least k={k} samples, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [ids[i] for i in perm]
    base, extra = divmod(n, k)
    folds, start = [], 0
    for f in range(k):
        size = base + (1 if f < extra else 0)
        val = shuffled[start:start + size]
        train = shuffled[:start] + shuffled[start + size:]
        folds.append((train, val))
        start += size
    return FoldPlan(k, folds, seed)


def cross_validate(bundle, config, moe_config, k=5, pretrain_bundle=None, jobs=1):
    """Train one best-on-validation model per fold.

    With ``pretrain_bundle`` the pseudo-label pretraining runs once and each
    fold fine-tunes from it. Returns ``(models, logs, plan)``.
    """
    plan = kfold_split(bundle.ids, k, config.seed)
    init = None
    pre_log = None
    fold_cfg = config
    if pretrain_bundle is not None and len(pretrain_bundle):
        if tuple(pretrain_bundle.branches) != tuple(bundle.branches):
            raise ConfigError("pretrain and labeled bundles have different branch specs")
        init, pre_log = train_supervised(pretrain_bundle, config, moe_config, stage="pretrain")
        fold_cfg = finetune_config(config)

    def run(f):
        train_ids, val_ids = plan.folds[f]
        stage = f"fold{f + 1}" if init is None else f"fold{f + 1}-finetune"
        return train_supervised(bundle.subset(train_ids), fold_cfg, moe_config, init_model=init,
                                val_bundle=bundle.subset(val_ids), stage=stage, select_best=True)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(k)))
    else:
        results = [run(f) for f in range(k)]
    models = [m for m, _ in results]
    logs = [lg for _, lg in results]
    if pre_log is not None:
        logs.insert(0, pre_log)
    return models, logs, plan


def normalize_rows(probs):
    probs = np.asarray(probs, dtype=np.float64)
    return probs / probs.sum(axis=1, keepdims=True)


def model_predictions(model, bundle):
    check_branches_match(bundle, model.config)
    return PredictionSet(bundle.ids, normalize_rows(model.predict_proba(bundle.data)))


def fold_ensemble_predict(models, bundle):
    """Equal-weight mean of the fold models' aggregated distributions."""
    if not models:
        raise ValueError("no models given")
    ref = models[0].config.to_dict()
    for m in models[1:]:
        if m.config.to_dict() != ref:
            raise ConfigError("fold models have different configurations")
    check_branches_match(bundle, models[0].config)
    total = np.zeros((len(bundle), models[0].config.n_classes))
    for m in models:
        total += m.predict_proba(bundle.data).astype(np.float64)
    return PredictionSet(bundle.ids, normalize_rows(total / len(models)))
