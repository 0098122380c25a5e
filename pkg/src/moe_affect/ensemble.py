"""Reliability-weighted voting across experts and rule-based re-ranking of neutral-topped votes."""
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import DataFormatError, PredictionSet, ReliabilityTable, check_ids, read_jsonl, write_jsonl
from .taxonomy import ABBREV, ANGRY, EMOTIONS, HAPPY, N_CLASSES, NEUTRAL, SURPRISED, label_to_index

VOTE_MODES = ("mass", "count")
RULE3_CLASSES = (ANGRY, HAPPY, SURPRISED)
DEFAULT_TAU = 0.25


def compute_reliability(predictions, truth):
    """Fraction of samples whose predicted label equals the truth.

    ``truth`` maps id -> label name or class index and must cover exactly the
    prediction ids.
    """
    if len(predictions) == 0:
        raise ValueError("reliability needs at least one evaluated sample")
    if set(predictions.ids) != set(truth):
        raise DataFormatError("prediction ids and truth ids differ")
    hits = 0
    for sid, lab in zip(predictions.ids, predictions.labels):
        t = truth[sid]
        hits += int(lab) == (int(t) if isinstance(t, (int, np.integer)) else label_to_index(t))
    return hits / len(predictions)


def reliability_table(experts, truth):
    """ReliabilityTable for a mapping expert id -> PredictionSet."""
    entries = {name: compute_reliability(ps, truth) for name, ps in experts.items()}
    n = {len(ps) for ps in experts.values()}
    return ReliabilityTable(entries, min(n) if n else 1)


def _ranking(share):
    # stable sort on -share: ties keep the lower class index first
    return np.argsort(-share, axis=1, kind="stable")


class VoteMass:
    """Per-sample vote mass V_k, normalized shares and class ranking."""

    def __init__(self, ids, mass):
        self.ids = tuple(ids)
        check_ids(self.ids, "vote mass")
        mass = np.array(mass, dtype=np.float64)
        if mass.size == 0:
            mass = mass.reshape(0, N_CLASSES)
        if mass.shape != (len(self.ids), N_CLASSES):
            raise DataFormatError(f"expected mass of shape {(len(self.ids), N_CLASSES)}, got {mass.shape}")
        if mass.size and (not np.isfinite(mass).all() or mass.min() < 0):
            raise DataFormatError("vote mass must be finite and non-negative")
        totals = mass.sum(axis=1)
        if (totals <= 0).any():
            raise DataFormatError(f"zero total vote mass for {self.ids[int(np.argmax(totals <= 0))]!r}")
        self.mass = mass
        self.share = mass / totals[:, None]
        self.ranking = _ranking(self.share)
        for a in (self.mass, self.share, self.ranking):
            a.setflags(write=False)

    def __len__(self):
        return len(self.ids)

    @property
    def top(self):
        return self.ranking[:, 0]

    @property
    def second(self):
        return self.ranking[:, 1]

    def predictions(self):
        return PredictionSet(self.ids, self.share)


def weighted_vote(experts, mode="mass"):
    """Combine ``[(PredictionSet, reliability), ...]`` into a vote.

    mode "mass": V_k = sum_e r_e * p_k^e. mode "count": V_k = sum_e r_e * [argmax_e == k].
    Returns ``(PredictionSet of normalized shares, VoteMass)``; labels are argmax with
    ties to the lowest class index.
    """
    if mode not in VOTE_MODES:
        raise ValueError(f"mode must be one of {VOTE_MODES}")
    if not experts:
        raise ValueError("at least one expert is required")
    rel = np.array([float(r) for _, r in experts])
    if (rel < 0).any() or not np.isfinite(rel).all():
        raise ValueError("reliabilities must be finite and >= 0")
    if not (rel > 0).any():
        raise ValueError("at least one reliability must be > 0")
    ids = experts[0][0].ids
    mass = np.zeros((len(ids), N_CLASSES))
    for ps, r in experts:
        if ps.ids != ids:
            raise DataFormatError("expert prediction sets are not aligned on the same ids")
        if mode == "mass":
            mass += float(r) * ps.probs
        else:
            mass[np.arange(len(ids)), ps.labels] += float(r)
    vote = VoteMass(ids, mass)
    return vote.predictions(), vote


@dataclass
class RerankRuleSet:
    tau: float = DEFAULT_TAU
    enabled: tuple = (1, 2, 3)


@dataclass
class RerankChange:
    id: str
    source: int
    target: int
    rule: int

    def to_dict(self):
        return {"id": self.id, "from": EMOTIONS[self.source], "to": EMOTIONS[self.target], "rule": self.rule}


def rerank_one(share, ranking, vlm_label, rules):
    """New class and the rule that fired (``None`` when unchanged) for one sample."""
    top, second = int(ranking[0]), int(ranking[1])
    if top != NEUTRAL:
        return top, None
    if 1 in rules.enabled and second == ANGRY:
        return ANGRY, 1
    if 2 in rules.enabled and share[second] > rules.tau:
        return second, 2
    if 3 in rules.enabled and vlm_label is not None and int(vlm_label) in RULE3_CLASSES:
        return int(vlm_label), 3
    return top, None


def _promote(row, target, source):
    """Swap the shares of ``source`` and ``target`` so ``target`` becomes the argmax."""
    row = row.copy()
    row[source], row[target] = row[target], row[source]
    rivals = [j for j in range(N_CLASSES) if j != target and row[j] >= row[target]]
    if rivals:
        # exact ties at the top: shift a hair of mass so the argmax is unambiguous
        delta = 1e-9
        for j in rivals:
            take = min(delta, row[j])
            row[j] -= take
            row[target] += take
    return row


def rerank(vote, vlm_labels=None, rules=None):
    """Apply the neutral re-ranking rules in order; first applicable rule wins.

    ``vlm_labels`` maps id -> class index (or name); missing ids skip rule 3.
    Returns ``(PredictionSet, [RerankChange])``; changed rows have their top
    share moved onto the new class so labels stay the probability argmax.
    """
    rules = rules or RerankRuleSet()
    vlm_labels = vlm_labels or {}
    probs = vote.share.copy()
    changes = []
    for i, sid in enumerate(vote.ids):
        v = vlm_labels.get(sid)
        if isinstance(v, str):
            v = label_to_index(v)
        new, rule = rerank_one(vote.share[i], vote.ranking[i], v, rules)
        top = int(vote.ranking[i, 0])
        if rule is not None and new != top:
            probs[i] = _promote(probs[i], new, top)
            changes.append(RerankChange(sid, top, new, rule))
    return PredictionSet(vote.ids, probs), changes


def distribution(labels):
    """Class shares (fractions, taxonomy order) of a sequence of class indices or names."""
    idx = [label_to_index(x) if isinstance(x, str) else int(x) for x in labels]
    if not idx:
        raise ValueError("distribution of an empty label list is undefined")
    counts = np.bincount(np.asarray(idx, dtype=np.int64), minlength=N_CLASSES)
    return counts / counts.sum()


def distribution_report(labels):
    """Percentages with one decimal, keyed by class name in taxonomy order."""
    shares = distribution(labels)
    return {name: round(100.0 * s, 1) for name, s in zip(EMOTIONS, shares)}


def format_distribution_table(rows):
    """Text table of class percentages; ``rows`` maps a row name to its label sequence."""
    width = max([len(k) for k in rows] + [5])
    lines = [" " * width + " | " + " ".join(f"{a:>6}" for a in ABBREV)]
    lines.append("-" * len(lines[0]))
    for name, labels in rows.items():
        pct = distribution_report(labels)
        lines.append(f"{name:<{width}} | " + " ".join(f"{pct[e]:5.1f}%" for e in EMOTIONS))
    return "\n".join(lines)


def write_vote_mass(vote, path):
    write_jsonl([{"id": sid, "mass": [float(x) for x in m], "share": [float(x) for x in s]}
                 for sid, m, s in zip(vote.ids, vote.mass, vote.share)], path)


def read_vote_mass(path):
    name = Path(path).name
    ids, mass = [], []
    for i, rec in enumerate(read_jsonl(path)):
        try:
            row = [float(x) for x in rec["mass"]]
            ids.append(rec["id"])
        except (KeyError, TypeError, ValueError):
            raise DataFormatError(f"{name}: record {i}: need id and mass") from None
        if len(row) != N_CLASSES or not all(math.isfinite(x) for x in row):
            raise DataFormatError(f"{name}: record {i}: mass must be {N_CLASSES} finite numbers")
        mass.append(row)
    return VoteMass(ids, np.array(mass).reshape(-1, N_CLASSES))
