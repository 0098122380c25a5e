"""Input validation helpers shared by the estimators and the CLI."""
import numpy as np

from .data import DataFormatError, EmbeddingBundle, PredictionSet
from .taxonomy import N_CLASSES, label_to_index


def check_bundle(X, labeled=False, branches=None):
    if not isinstance(X, EmbeddingBundle):
        raise TypeError(f"expected an EmbeddingBundle, got {type(X).__name__}")
    if labeled and not X.is_labeled:
        raise DataFormatError("a fully labeled, non-empty bundle is required")
    if branches is not None and tuple(X.branches) != tuple(branches):
        raise DataFormatError("bundle branches do not match the fitted branches")
    return X


def check_targets(y, n):
    """Class indices from names or integers; length must equal ``n``."""
    arr = np.array([label_to_index(v) if isinstance(v, str) else int(v) for v in y], dtype=np.int64)
    if arr.shape != (n,):
        raise ValueError(f"expected {n} targets, got {arr.shape[0]}")
    if arr.size and (arr.min() < 0 or arr.max() >= N_CLASSES):
        raise ValueError("target index out of range")
    return arr


def check_truth(truth, ids):
    """Mapping id -> class index covering exactly ``ids``."""
    if not isinstance(truth, dict):
        truth = dict(zip(ids, truth))
    missing = [sid for sid in ids if sid not in truth]
    if missing or len(truth) != len(ids):
        raise DataFormatError(f"truth does not cover the prediction ids (e.g. {missing[:1]})")
    return {sid: (label_to_index(v) if isinstance(v, str) else int(v)) for sid, v in truth.items()}


def check_prediction_sets(sets):
    """Named prediction sets aligned to the ids of the first one."""
    if isinstance(sets, PredictionSet):
        sets = [sets]
    if isinstance(sets, dict):
        items = list(sets.items())
    else:
        items = [(f"expert{i}", ps) for i, ps in enumerate(sets)]
    if not items:
        raise ValueError("no prediction sets given")
    for name, ps in items:
        if not isinstance(ps, PredictionSet):
            raise TypeError(f"{name}: expected a PredictionSet, got {type(ps).__name__}")
    ref = items[0][1].ids
    return {name: ps.align(ref) for name, ps in items}
