from dataclasses import dataclass, field

import numpy as np

from .data import DataFormatError, read_jsonl, write_jsonl
from .taxonomy import EMOTIONS, N_CLASSES, label_to_index


@dataclass
class PseudoSet:
    ids: list
    labels: list  # class indices
    provenance: dict  # id -> (model label, vlm label)
    source_sizes: tuple = (0, 0)
    diagnostics: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.ids)

    def label_map(self):
        return {sid: EMOTIONS[lab] for sid, lab in zip(self.ids, self.labels)}


def _vlm_map(vlm_records):
    if isinstance(vlm_records, dict):
        return {k: (label_to_index(v) if isinstance(v, str) else int(v)) for k, v in vlm_records.items()}
    return {r.id: r.label_index for r in vlm_records}


def consensus_filter(model_preds, vlm_records, limit=None):
    """Keep samples present in both sources whose labels agree, in model prediction order.

    ``vlm_records`` is a list of VlmKnowledgeRecord (or a mapping id -> label).
    ``limit`` truncates the model predictions to their first N samples before filtering.
    """
    vlm = _vlm_map(vlm_records)
    pairs = list(zip(model_preds.ids, model_preds.labels))
    if limit is not None:
        if limit < 0:
            raise ValueError("limit must be >= 0")
        pairs = pairs[:limit]
    ids, labels, prov = [], [], {}
    only_model = 0
    for sid, lab in pairs:
        lab = int(lab)
        if sid not in vlm:
            only_model += 1
            continue
        if vlm[sid] == lab:
            ids.append(sid)
            labels.append(lab)
            prov[sid] = (lab, lab)
    model_ids = {sid for sid, _ in pairs}
    only_vlm = sum(1 for sid in vlm if sid not in model_ids)
    diag = {"only_model": only_model, "only_vlm": only_vlm, "shared": len(pairs) - only_model}
    return PseudoSet(ids, labels, prov, (len(pairs), len(vlm)), diag)


def agreement_report(model_preds, vlm_records):
    """Cross-labeler agreement over shared ids: overall rate, per class, 6x6 matrix, retained distribution."""
    vlm = _vlm_map(vlm_records)
    cm = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for sid, lab in zip(model_preds.ids, model_preds.labels):
        if sid in vlm:
            cm[int(lab), vlm[sid]] += 1
    shared = int(cm.sum())
    agree = int(np.trace(cm))
    rows = cm.sum(axis=1)
    per_class = {EMOTIONS[k]: (float(cm[k, k] / rows[k]) if rows[k] else 0.0) for k in range(N_CLASSES)}
    diag = np.diag(cm).astype(np.float64)
    retained = {EMOTIONS[k]: (float(diag[k] / agree) if agree else 0.0) for k in range(N_CLASSES)}
    return {
        "shared": shared,
        "agreed": agree,
        "agreement": agree / shared if shared else 0.0,
        "per_class_agreement": per_class,
        "confusion": cm.tolist(),  # rows = model label, columns = VLM label
        "retained_distribution": retained,
    }


def export_pseudo_bundle(pseudo, bundle):
    """Restrict ``bundle`` to the consensus ids and attach the consensus labels."""
    where = bundle.index_of()
    missing = [sid for sid in pseudo.ids if sid not in where]
    if missing:
        raise DataFormatError(f"{len(missing)} pseudo-labeled ids missing from bundle, e.g. {missing[0]!r}")
    sub = bundle.take([where[sid] for sid in pseudo.ids])
    return sub.with_labels(pseudo.label_map())


def write_pseudo_set(pseudo, path):
    write_jsonl([{"id": sid, "label": EMOTIONS[lab], "model_label": EMOTIONS[pseudo.provenance[sid][0]],
                  "vlm_label": EMOTIONS[pseudo.provenance[sid][1]]}
                 for sid, lab in zip(pseudo.ids, pseudo.labels)], path)


def read_pseudo_set(path):
    ids, labels, prov = [], [], {}
    for i, rec in enumerate(read_jsonl(path)):
        try:
            sid = rec["id"]
            lab, m, v = (label_to_index(rec[k]) for k in ("label", "model_label", "vlm_label"))
        except (KeyError, ValueError) as exc:
            raise DataFormatError(f"{path}: record {i}: {exc}") from None
        if not lab == m == v:
            raise DataFormatError(f"{path}: record {i}: labels disagree for {sid!r}")
        ids.append(sid)
        labels.append(lab)
        prov[sid] = (m, v)
    return PseudoSet(ids, labels, prov, (len(ids), len(ids)))
