"""Persistent data types and their on-disk formats.

Bundle directory layout::

    manifest.json   {"format_version": 1, "ids": [...], "branches": [...],
                     "labels_file": "labels.csv" (optional), "checksum": "<sha256>"}
    <name>.emb      b"EMB1", u32 rows, u32 cols, rows*cols float32 (little endian, row-major)
    <name>.seq      b"SEQ1", u32 n_samples, u32 dim, then per sample u32 T + T*dim float32
    labels.csv      id,label

Predictions and VLM records are JSON lines.
"""
import csv
import hashlib
import io
import json
import math
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .taxonomy import EMOTIONS, N_CLASSES, index_to_label, label_to_index

FORMAT_VERSION = 1
EMB_MAGIC = b"EMB1"
SEQ_MAGIC = b"SEQ1"
PROB_SUM_TOL = 1e-5
# rows closer to 1 than this are kept verbatim so text round-trips stay exact
_RENORM_EPS = 1e-9


class DataFormatError(ValueError):
    """Malformed or inconsistent input file."""


def _freeze(arr):
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class BranchSpec:
    name: str
    kind: str = "vector"
    dim: int = 1

    def __post_init__(self):
        if self.kind not in ("vector", "sequence"):
            raise ValueError(f"branch {self.name!r}: kind must be 'vector' or 'sequence', got {self.kind!r}")
        if int(self.dim) < 1:
            raise ValueError(f"branch {self.name!r}: dim must be >= 1")
        if not self.name:
            raise ValueError("branch name must be non-empty")

    def to_dict(self):
        return {"name": self.name, "kind": self.kind, "dim": int(self.dim)}

    @classmethod
    def from_dict(cls, d):
        return cls(str(d["name"]), str(d["kind"]), int(d["dim"]))


def check_ids(ids, what="ids"):
    seen = set()
    for i, sid in enumerate(ids):
        if not isinstance(sid, str) or not sid:
            raise DataFormatError(f"{what}: record {i} has an empty or non-string id")
        if sid in seen:
            raise DataFormatError(f"{what}: duplicate id {sid!r} at record {i}")
        seen.add(sid)


class EmbeddingBundle:
    """Per-sample, per-branch features with optional labels.

    ``data`` maps branch name to a float32 matrix (vector branches) or a list
    of float32 ``(T_i, dim)`` matrices (sequence branches), aligned with ``ids``.
    ``labels`` maps id to emotion name for the labeled subset.
    """

    def __init__(self, branches, ids, data, labels=None):
        self.branches = tuple(branches)
        self.ids = tuple(ids)
        self.labels = dict(labels or {})
        names = [b.name for b in self.branches]
        if len(set(names)) != len(names):
            raise DataFormatError(f"duplicate branch names in {names}")
        check_ids(self.ids)
        n = len(self.ids)
        self.data = {}
        for b in self.branches:
            if b.name not in data:
                raise DataFormatError(f"branch {b.name!r} has no data")
            raw = data[b.name]
            if b.kind == "vector":
                arr = np.array(raw, dtype=np.float32)
                if n == 0 and arr.size == 0:
                    arr = np.zeros((0, b.dim), np.float32)
                if arr.shape != (n, b.dim):
                    raise DataFormatError(f"branch {b.name!r}: expected shape {(n, b.dim)}, got {arr.shape}")
                if not np.isfinite(arr).all():
                    row = int(np.argwhere(~np.isfinite(arr))[0][0])
                    raise DataFormatError(f"branch {b.name!r}: non-finite value at record {row}")
                self.data[b.name] = _freeze(arr)
            else:
                if len(raw) != n:
                    raise DataFormatError(f"branch {b.name!r}: {len(raw)} sequences for {n} ids")
                seqs = []
                for i, s in enumerate(raw):
                    s = np.array(s, dtype=np.float32)
                    if s.ndim != 2 or s.shape[1] != b.dim:
                        raise DataFormatError(f"branch {b.name!r}: record {i} has shape {s.shape}, want (T, {b.dim})")
                    if s.shape[0] < 1:
                        raise DataFormatError(f"branch {b.name!r}: record {i} is an empty sequence")
                    if not np.isfinite(s).all():
                        raise DataFormatError(f"branch {b.name!r}: non-finite value at record {i}")
                    seqs.append(_freeze(s))
                self.data[b.name] = tuple(seqs)
        idset = set(self.ids)
        for sid, lab in self.labels.items():
            if sid not in idset:
                raise DataFormatError(f"label given for unknown id {sid!r}")
            label_to_index(lab)

    def __len__(self):
        return len(self.ids)

    def __repr__(self):
        kinds = ", ".join(f"{b.name}:{b.kind}[{b.dim}]" for b in self.branches)
        return f"EmbeddingBundle(n={len(self)}, branches=[{kinds}], labeled={len(self.labels)})"

    @property
    def is_labeled(self):
        return len(self.ids) > 0 and all(sid in self.labels for sid in self.ids)

    def label_indices(self):
        missing = [sid for sid in self.ids if sid not in self.labels]
        if missing:
            raise DataFormatError(f"{len(missing)} unlabeled samples, e.g. {missing[0]!r}")
        return np.array([label_to_index(self.labels[sid]) for sid in self.ids], dtype=np.int64)

    def index_of(self):
        return {sid: i for i, sid in enumerate(self.ids)}

    def take(self, positions):
        positions = [int(p) for p in positions]
        ids = [self.ids[p] for p in positions]
        data = {}
        for b in self.branches:
            src = self.data[b.name]
            if b.kind == "vector":
                data[b.name] = src[positions] if positions else np.zeros((0, b.dim), np.float32)
            else:
                data[b.name] = [src[p] for p in positions]
        labels = {sid: self.labels[sid] for sid in ids if sid in self.labels}
        return EmbeddingBundle(self.branches, ids, data, labels)

    def subset(self, ids):
        where = self.index_of()
        missing = [sid for sid in ids if sid not in where]
        if missing:
            raise DataFormatError(f"{len(missing)} ids not in bundle, e.g. {missing[0]!r}")
        return self.take([where[sid] for sid in ids])

    def with_labels(self, labels):
        return EmbeddingBundle(self.branches, self.ids, dict(self.data), labels)

    def checksum(self):
        h = hashlib.sha256()
        for b in self.branches:
            rows = self.data[b.name]
            for sid, row in zip(self.ids, rows):
                h.update(sid.encode("utf-8") + b"\x00" + b.name.encode("utf-8") + b"\x00")
                h.update(np.ascontiguousarray(row, dtype="<f4").tobytes())
        return h.hexdigest()

    def equals(self, other):
        if (self.branches, self.ids, self.labels) != (other.branches, other.ids, other.labels):
            return False
        for b in self.branches:
            a, o = self.data[b.name], other.data[b.name]
            if b.kind == "vector":
                if a.tobytes() != o.tobytes():
                    return False
            elif any(x.shape != y.shape or x.tobytes() != y.tobytes() for x, y in zip(a, o)):
                return False
        return True


def _encode_vector(arr):
    rows, cols = arr.shape
    return EMB_MAGIC + struct.pack("<II", rows, cols) + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def _encode_sequence(seqs, dim):
    chunks = [SEQ_MAGIC, struct.pack("<II", len(seqs), dim)]
    for s in seqs:
        chunks.append(struct.pack("<I", s.shape[0]))
        chunks.append(np.ascontiguousarray(s, dtype="<f4").tobytes())
    return b"".join(chunks)


def write_labels(labels, ids, path):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "label"])
    for sid in ids:
        if sid in labels:
            w.writerow([sid, labels[sid]])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_labels(path):
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["id", "label"]:
            raise DataFormatError(f"{path.name}: expected header 'id,label', got {header}")
        labels = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise DataFormatError(f"{path.name}: line {lineno}: expected 2 fields")
            sid, lab = row
            if sid in labels:
                raise DataFormatError(f"{path.name}: line {lineno}: duplicate id {sid!r}")
            try:
                label_to_index(lab)
            except ValueError as exc:
                raise DataFormatError(f"{path.name}: line {lineno}: {exc}") from None
            labels[sid] = lab
    return labels


def write_bundle(bundle, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for b in bundle.branches:
        if b.kind == "vector":
            (path / f"{b.name}.emb").write_bytes(_encode_vector(bundle.data[b.name]))
        else:
            (path / f"{b.name}.seq").write_bytes(_encode_sequence(bundle.data[b.name], b.dim))
    manifest = {
        "format_version": FORMAT_VERSION,
        "ids": list(bundle.ids),
        "branches": [b.to_dict() for b in bundle.branches],
    }
    if bundle.labels:
        manifest["labels_file"] = "labels.csv"
        write_labels(bundle.labels, bundle.ids, path / "labels.csv")
    manifest["checksum"] = bundle.checksum()
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


def _read_vector(fpath, n, dim):
    data = fpath.read_bytes()
    name = fpath.name
    if data[:4] != EMB_MAGIC:
        raise DataFormatError(f"{name}: bad magic {data[:4]!r} at byte 0")
    if len(data) < 12:
        raise DataFormatError(f"{name}: truncated header at byte {len(data)}")
    rows, cols = struct.unpack_from("<II", data, 4)
    if cols != dim:
        raise DataFormatError(f"{name}: dimension mismatch at byte 8: header says {cols}, manifest says {dim}")
    if rows != n:
        raise DataFormatError(f"{name}: row count mismatch at byte 4: header says {rows}, manifest has {n} ids")
    expected = 12 + rows * cols * 4
    if len(data) != expected:
        raise DataFormatError(f"{name}: payload size mismatch at byte {len(data)}: expected {expected} bytes")
    arr = np.frombuffer(data, dtype="<f4", offset=12).reshape(rows, cols).astype(np.float32)
    bad = ~np.isfinite(arr)
    if bad.any():
        r, c = (int(v) for v in np.argwhere(bad)[0])
        raise DataFormatError(f"{name}: non-finite value at byte {12 + 4 * (r * cols + c)} (record {r})")
    return arr


def _read_sequence(fpath, n, dim):
    data = fpath.read_bytes()
    name = fpath.name
    if data[:4] != SEQ_MAGIC:
        raise DataFormatError(f"{name}: bad magic {data[:4]!r} at byte 0")
    if len(data) < 12:
        raise DataFormatError(f"{name}: truncated header at byte {len(data)}")
    count, d = struct.unpack_from("<II", data, 4)
    if d != dim:
        raise DataFormatError(f"{name}: dimension mismatch at byte 8: header says {d}, manifest says {dim}")
    if count != n:
        raise DataFormatError(f"{name}: sample count mismatch at byte 4: header says {count}, manifest has {n} ids")
    pos = 12
    seqs = []
    for i in range(count):
        if pos + 4 > len(data):
            raise DataFormatError(f"{name}: truncated length field at byte {pos} (record {i})")
        (T,) = struct.unpack_from("<I", data, pos)
        if T < 1:
            raise DataFormatError(f"{name}: empty sequence at byte {pos} (record {i})")
        pos += 4
        size = T * dim * 4
        if pos + size > len(data):
            raise DataFormatError(f"{name}: truncated payload at byte {pos} (record {i})")
        s = np.frombuffer(data, dtype="<f4", count=T * dim, offset=pos).reshape(T, dim).astype(np.float32)
        if not np.isfinite(s).all():
            raise DataFormatError(f"{name}: non-finite value at byte {pos} (record {i})")
        seqs.append(s)
        pos += size
    if pos != len(data):
        raise DataFormatError(f"{name}: {len(data) - pos} trailing bytes at byte {pos}")
    return seqs


def read_bundle(path):
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.is_file():
        raise FileNotFoundError(f"missing manifest: {mpath}")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"manifest.json: invalid JSON at byte {exc.pos}") from None
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DataFormatError(f"manifest.json: unsupported format_version {manifest.get('format_version')!r}")
    ids = manifest.get("ids")
    if not isinstance(ids, list):
        raise DataFormatError("manifest.json: 'ids' must be a list")
    check_ids(ids, "manifest.json")
    try:
        branches = [BranchSpec.from_dict(b) for b in manifest.get("branches", [])]
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"manifest.json: bad branch entry: {exc}") from None
    data = {}
    for b in branches:
        ext = ".emb" if b.kind == "vector" else ".seq"
        fpath = path / f"{b.name}{ext}"
        if not fpath.is_file():
            raise FileNotFoundError(f"missing branch file: {fpath}")
        reader = _read_vector if b.kind == "vector" else _read_sequence
        data[b.name] = reader(fpath, len(ids), b.dim)
    labels = {}
    if manifest.get("labels_file"):
        lpath = path / manifest["labels_file"]
        if not lpath.is_file():
            raise FileNotFoundError(f"missing labels file: {lpath}")
        labels = read_labels(lpath)
    bundle = EmbeddingBundle(branches, ids, data, labels)
    if manifest.get("checksum") != bundle.checksum():
        raise DataFormatError("manifest.json: checksum mismatch between manifest and branch files")
    return bundle


def argmax_labels(probs):
    # np.argmax returns the first maximum, i.e. the lowest class index on ties
    return np.argmax(probs, axis=1).astype(np.int64)


class PredictionSet:
    """Per-sample class probabilities and their argmax labels."""

    def __init__(self, ids, probs, labels=None):
        self.ids = tuple(ids)
        check_ids(self.ids, "predictions")
        probs = np.array(probs, dtype=np.float64)
        if probs.size == 0:
            probs = probs.reshape(0, N_CLASSES)
        if probs.shape != (len(self.ids), N_CLASSES):
            raise DataFormatError(f"expected probs of shape {(len(self.ids), N_CLASSES)}, got {probs.shape}")
        if probs.size and (not np.isfinite(probs).all() or probs.min() < 0 or probs.max() > 1):
            raise DataFormatError("predictions: probabilities must be finite and within [0, 1]")
        sums = probs.sum(axis=1)
        bad = np.abs(sums - 1.0) > PROB_SUM_TOL
        if bad.any():
            i = int(np.argmax(bad))
            raise DataFormatError(f"predictions: row {i} ({self.ids[i]!r}) sums to {sums[i]!r}")
        self.probs = _freeze(probs)
        expected = argmax_labels(probs)
        if labels is None:
            labels = expected
        labels = np.array(labels, dtype=np.int64).reshape(len(self.ids))
        if not np.array_equal(labels, expected):
            i = int(np.argmax(labels != expected))
            raise DataFormatError(f"predictions: label of {self.ids[i]!r} is not the argmax of its probabilities")
        self.labels = _freeze(labels)

    def __len__(self):
        return len(self.ids)

    def __repr__(self):
        return f"PredictionSet(n={len(self)})"

    def label_names(self):
        return [EMOTIONS[i] for i in self.labels]

    def as_dict(self):
        return {sid: int(lab) for sid, lab in zip(self.ids, self.labels)}

    def align(self, ids):
        where = {sid: i for i, sid in enumerate(self.ids)}
        missing = [sid for sid in ids if sid not in where]
        if missing or len(ids) != len(self.ids):
            raise DataFormatError(f"prediction ids do not match (e.g. {missing[:1] or 'size differs'})")
        pos = [where[sid] for sid in ids]
        return PredictionSet(ids, self.probs[pos], self.labels[pos])

    def equals(self, other):
        return (self.ids == other.ids and self.probs.tobytes() == other.probs.tobytes()
                and np.array_equal(self.labels, other.labels))


def write_predictions(ps, path):
    lines = []
    for sid, row, lab in zip(ps.ids, ps.probs, ps.labels):
        lines.append(json.dumps({"id": sid, "probs": [float(v) for v in row], "label": index_to_label(lab)}))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _json_lines(path):
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path.name}: line {lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise DataFormatError(f"{path.name}: line {lineno}: expected a JSON object")
            yield lineno, rec


def read_predictions(path):
    name = Path(path).name
    ids, rows, labels = [], [], []
    for lineno, rec in _json_lines(path):
        try:
            sid = rec["id"]
            row = [float(v) for v in rec["probs"]]
            lab = rec["label"]
        except (KeyError, TypeError, ValueError):
            raise DataFormatError(f"{name}: line {lineno}: need id, probs (6 numbers) and label") from None
        if len(row) != N_CLASSES or not all(math.isfinite(v) for v in row):
            raise DataFormatError(f"{name}: line {lineno}: probs must be {N_CLASSES} finite numbers")
        total = math.fsum(row)
        if abs(total - 1.0) > PROB_SUM_TOL:
            raise DataFormatError(f"{name}: line {lineno}: probabilities sum to {total!r}")
        if abs(total - 1.0) > _RENORM_EPS:
            row = [v / total for v in row]
        try:
            idx = label_to_index(lab)
        except ValueError as exc:
            raise DataFormatError(f"{name}: line {lineno}: {exc}") from None
        if idx != int(np.argmax(row)):
            raise DataFormatError(f"{name}: line {lineno}: label {lab!r} is not the argmax of probs")
        ids.append(sid)
        rows.append(row)
        labels.append(idx)
    try:
        return PredictionSet(ids, np.array(rows).reshape(-1, N_CLASSES), labels)
    except DataFormatError as exc:
        raise DataFormatError(f"{name}: {exc}") from None


@dataclass
class VlmKnowledgeRecord:
    id: str
    reasoning: str
    confidence: dict
    label: str
    modality_contribution: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        label_to_index(self.label)
        if set(self.confidence) != set(EMOTIONS):
            raise DataFormatError(f"record {self.id!r}: confidence must cover exactly {EMOTIONS}")
        for what, mapping in (("confidence", self.confidence), ("modality_contribution", self.modality_contribution)):
            for k, v in mapping.items():
                if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v) or v < 0:
                    raise DataFormatError(f"record {self.id!r}: {what}[{k!r}] must be a finite number >= 0, got {v!r}")

    @property
    def label_index(self):
        return label_to_index(self.label)

    def confidence_vector(self):
        return np.array([self.confidence[name] for name in EMOTIONS], dtype=np.float64)

    def to_dict(self):
        out = {"id": self.id, "reasoning": self.reasoning, "confidence": self.confidence,
               "label": self.label, "modality_contribution": self.modality_contribution}
        out.update(self.extra)
        return out


_VLM_FIELDS = ("id", "reasoning", "confidence", "label", "modality_contribution")


def read_vlm_records(path):
    name = Path(path).name
    records, seen = [], set()
    for lineno, rec in _json_lines(path):
        missing = [f for f in _VLM_FIELDS if f not in rec]
        if missing:
            raise DataFormatError(f"{name}: line {lineno}: missing fields {missing}")
        if not isinstance(rec["confidence"], dict) or not isinstance(rec["modality_contribution"], dict):
            raise DataFormatError(f"{name}: line {lineno}: confidence and modality_contribution must be objects")
        sid = rec["id"]
        if not isinstance(sid, str) or not sid:
            raise DataFormatError(f"{name}: line {lineno}: id must be a non-empty string")
        if sid in seen:
            raise DataFormatError(f"{name}: line {lineno}: duplicate id {sid!r}")
        seen.add(sid)
        extra = {k: v for k, v in rec.items() if k not in _VLM_FIELDS}
        try:
            records.append(VlmKnowledgeRecord(sid, rec["reasoning"], rec["confidence"], rec["label"],
                                              rec["modality_contribution"], extra))
        except ValueError as exc:
            raise DataFormatError(f"{name}: line {lineno}: {exc}") from None
    return records


def write_vlm_records(records, path):
    Path(path).write_text("".join(json.dumps(r.to_dict()) + "\n" for r in records), encoding="utf-8")


@dataclass
class ReliabilityTable:
    entries: dict
    n_eval: int = 1

    def __post_init__(self):
        if self.n_eval < 1:
            raise ValueError("n_eval must be >= 1")
        for k, r in self.entries.items():
            if not 0.0 <= r <= 1.0:
                raise ValueError(f"reliability of {k!r} outside [0, 1]: {r}")


def write_reliabilities(table, path):
    Path(path).write_text(json.dumps(table.entries, indent=2) + "\n", encoding="utf-8")


def read_reliabilities(path):
    name = Path(path).name
    try:
        entries = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{name}: invalid JSON at byte {exc.pos}") from None
    if not isinstance(entries, dict):
        raise DataFormatError(f"{name}: expected an object mapping expert id to reliability")
    try:
        return ReliabilityTable({str(k): float(v) for k, v in entries.items()})
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{name}: {exc}") from None


def write_jsonl(records, path):
    Path(path).write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def read_jsonl(path):
    return [rec for _, rec in _json_lines(path)]


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_sha256(path):
    """Checksums of every file under ``path`` (a file or directory), sorted by relative name."""
    path = Path(path)
    if path.is_file():
        return [(path.name, file_sha256(path))]
    out = []
    for root, _, files in sorted(os.walk(path)):
        for f in sorted(files):
            full = Path(root) / f
            out.append((str(full.relative_to(path.parent)), file_sha256(full)))
    return out
