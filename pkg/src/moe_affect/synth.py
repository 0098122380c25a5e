"""Seeded Gaussian-mixture fixtures: labeled bundles, AU sequences, simulated labelers.

All randomness comes from numpy's PCG64 (``np.random.default_rng``), seeded
with integer lists so each component draws from its own stream.
"""
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import BranchSpec, EmbeddingBundle, PredictionSet, VlmKnowledgeRecord
from .taxonomy import EMOTIONS, N_CLASSES

# class shares of the labeled validation data (neu, ang, hap, sad, wor, sur), in percent
VALID_DISTRIBUTION = (24.8, 24.0, 20.6, 14.5, 12.2, 3.8)
VALID_PRIOR = tuple(v / sum(VALID_DISTRIBUTION) for v in VALID_DISTRIBUTION)
AU_DIM = 35
MODALITIES = ("video", "audio", "text")


class SynthConfigError(ValueError):
    pass


def symmetric_confusion(accuracy, n_classes=N_CLASSES):
    """Rows put ``accuracy`` on the diagonal and spread the rest uniformly."""
    off = (1.0 - accuracy) / (n_classes - 1)
    cm = np.full((n_classes, n_classes), off)
    np.fill_diagonal(cm, accuracy)
    return cm


def uniform_confusion(n_classes=N_CLASSES):
    return np.full((n_classes, n_classes), 1.0 / n_classes)


@dataclass
class SynthBranch:
    name: str
    kind: str = "vector"
    dim: int = 16
    separation: float = 1.0
    noise: float = 1.0
    informative: bool = True
    t_min: int = 4
    t_max: int = 12

    def spec(self):
        return BranchSpec(self.name, self.kind, self.dim)


def default_branches():
    return [
        SynthBranch("audio", "vector", 24, 1.0, 1.0),
        SynthBranch("face", "vector", 24, 1.0, 1.0),
        SynthBranch("text", "vector", 24, 0.6, 1.0),
        SynthBranch("au", "sequence", AU_DIM, 0.6, 1.0, t_min=4, t_max=12),
    ]


@dataclass
class SynthConfig:
    n: int = 600
    prior: list = field(default_factory=lambda: list(VALID_PRIOR))
    branches: list = field(default_factory=default_branches)
    model_confusion: list = field(default_factory=lambda: symmetric_confusion(0.70).tolist())
    vlm_confusion: list = field(default_factory=lambda: symmetric_confusion(0.65).tolist())
    seed: int = 42
    task_seed: int = 0  # class centers; bundles sharing it are draws from the same task

    def __post_init__(self):
        self.branches = [b if isinstance(b, SynthBranch) else SynthBranch(**b) for b in self.branches]
        validate_distribution(self.prior, "prior")
        for name in ("model_confusion", "vlm_confusion"):
            cm = np.asarray(getattr(self, name), dtype=np.float64)
            if cm.shape != (N_CLASSES, N_CLASSES):
                raise SynthConfigError(f"{name} must be {N_CLASSES}x{N_CLASSES}")
            for row in cm:
                validate_distribution(row, name)
        if self.n < 0:
            raise SynthConfigError("n must be >= 0")
        for b in self.branches:
            if b.noise <= 0:
                raise SynthConfigError(f"branch {b.name!r}: noise must be > 0")
            if b.kind == "sequence" and not 1 <= b.t_min <= b.t_max:
                raise SynthConfigError(f"branch {b.name!r}: need 1 <= t_min <= t_max")
            b.spec()

    def to_dict(self):
        return asdict(self)


def validate_distribution(p, what="distribution"):
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (N_CLASSES,) or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
        raise SynthConfigError(f"{what} must be {N_CLASSES} non-negative numbers summing to 1")


def sample_ids(n, prefix="s"):
    return [f"{prefix}{i:06d}" for i in range(n)]


def sample_labels(n, prior, seed):
    return np.random.default_rng([seed, 0]).choice(N_CLASSES, size=n, p=np.asarray(prior, dtype=np.float64))


def _branch_data(branch, y, rng, center_rng):
    n_centers = N_CLASSES if branch.informative else 1
    centers = center_rng.normal(size=(n_centers, branch.dim)) * branch.separation
    idx = y if branch.informative else np.zeros_like(y)
    if branch.kind == "vector":
        return (centers[idx] + branch.noise * rng.normal(size=(len(y), branch.dim))).astype(np.float32)
    lengths = rng.integers(branch.t_min, branch.t_max + 1, size=len(y))
    seqs = []
    for c, T in zip(idx, lengths):
        # onset-apex-offset envelope over the clip
        env = np.sin(np.pi * (np.arange(T) + 0.5) / T)[:, None]
        frames = centers[c][None, :] * (0.5 + env) + branch.noise * rng.normal(size=(T, branch.dim))
        seqs.append(frames.astype(np.float32))
    return seqs


def gen_bundle(config, labels=None, id_prefix="s"):
    """Labeled bundle drawn from per-class Gaussian centers.

    ``labels`` (class indices) overrides sampling from the prior.
    """
    y = sample_labels(config.n, config.prior, config.seed) if labels is None else np.asarray(labels, np.int64)
    ids = sample_ids(len(y), id_prefix)
    data = {}
    for j, b in enumerate(config.branches):
        data[b.name] = _branch_data(b, y, np.random.default_rng([config.seed, 100 + j]),
                                    np.random.default_rng([config.task_seed, 200 + j]))
    lab = {sid: EMOTIONS[c] for sid, c in zip(ids, y)}
    return EmbeddingBundle([b.spec() for b in config.branches], ids, data, lab)


def smoothed_onehot(labels, epsilon=0.05):
    labels = np.asarray(labels, dtype=np.int64)
    probs = np.full((len(labels), N_CLASSES), epsilon / N_CLASSES)
    probs[np.arange(len(labels)), labels] += 1.0 - epsilon
    return probs


def gen_noisy_predictions(truth, confusion, seed, ids=None, epsilon=0.05):
    """Simulated labeler: sample each label from the confusion row of its true class.

    Probabilities are the sampled one-hot smoothed by ``epsilon`` toward uniform.
    """
    truth = np.asarray(truth, dtype=np.int64)
    cm = np.asarray(confusion, dtype=np.float64)
    for row in cm:
        validate_distribution(row, "confusion row")
    rng = np.random.default_rng([seed, 2])
    u = rng.random(len(truth))
    cdf = np.cumsum(cm, axis=1)
    cdf[:, -1] = 1.0
    pred = (u[:, None] >= cdf[truth]).sum(axis=1)
    ids = sample_ids(len(truth)) if ids is None else list(ids)
    return PredictionSet(ids, smoothed_onehot(pred, epsilon))


def gen_soft_predictions(truth, confusion, seed, ids=None, concentration=3.0, noise=0.6, truth_boost=0.0):
    """Simulated labeler with graded probabilities.

    The predicted class is sampled from the confusion row; logits are
    ``concentration`` above the rest on that class plus Gaussian noise
    elsewhere. ``truth_boost`` raises the true class's logit on mistaken
    samples, which makes the runner-up class informative.
    """
    truth = np.asarray(truth, dtype=np.int64)
    hard = gen_noisy_predictions(truth, confusion, seed, ids)
    rng = np.random.default_rng([seed, 3])
    logits = noise * rng.normal(size=(len(truth), N_CLASSES))
    pred = hard.labels
    wrong = pred != truth
    logits[np.flatnonzero(wrong), truth[wrong]] += truth_boost
    logits[np.arange(len(truth)), pred] = np.max(logits, axis=1) + concentration
    logits -= logits.max(axis=1, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=1, keepdims=True)
    return PredictionSet(hard.ids, probs)


def gen_vlm_records(predictions, seed):
    """Schema-complete VLM records mirroring ``predictions`` (label and confidences)."""
    rng = np.random.default_rng([seed, 4])
    contrib = rng.dirichlet(np.ones(len(MODALITIES)), size=len(predictions))
    records = []
    for i, (sid, row, lab) in enumerate(zip(predictions.ids, predictions.probs, predictions.labels)):
        records.append(VlmKnowledgeRecord(
            id=sid,
            reasoning=f"synthetic record {i}: cues point to {EMOTIONS[lab]}",
            confidence={name: float(v) for name, v in zip(EMOTIONS, row)},
            label=EMOTIONS[lab],
            modality_contribution={m: float(w) for m, w in zip(MODALITIES, contrib[i])},
        ))
    return records
