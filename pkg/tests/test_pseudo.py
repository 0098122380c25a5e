import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_affect.data import DataFormatError, PredictionSet, read_bundle, write_bundle
from moe_affect.pseudo import (agreement_report, consensus_filter, export_pseudo_bundle, read_pseudo_set,
                               write_pseudo_set)
from moe_affect.synth import (SynthBranch, SynthConfig, gen_bundle, gen_noisy_predictions, gen_vlm_records,
                              sample_ids, sample_labels, symmetric_confusion, uniform_confusion)
from moe_affect.taxonomy import EMOTIONS, label_to_index


def preds(mapping):
    ids = list(mapping)
    return PredictionSet(ids, np.eye(6)[[label_to_index(mapping[s]) for s in ids]])


def test_definitional_intersection():
    a = preds({"s1": "happy", "s2": "neutral", "s3": "angry"})
    b = {"s1": "happy", "s2": "sad", "s3": "angry"}
    ps = consensus_filter(a, b)
    assert ps.label_map() == {"s1": "happy", "s3": "angry"}
    assert ps.ids == ["s1", "s3"]
    assert ps.provenance["s3"] == (1, 1)


def test_disjoint_sources_give_empty_set():
    ps = consensus_filter(preds({"a": "sad"}), {"b": "sad"})
    assert len(ps) == 0
    assert ps.diagnostics == {"only_model": 1, "only_vlm": 1, "shared": 0}


def test_accepts_vlm_records():
    a = preds({"s1": "happy", "s2": "worried"})
    records = gen_vlm_records(preds({"s1": "happy", "s2": "sad"}), seed=0)
    assert consensus_filter(a, records).ids == ["s1"]


def test_limit_applies_before_filtering():
    a = preds({"s1": "sad", "s2": "happy", "s3": "happy"})
    b = {"s1": "angry", "s2": "happy", "s3": "happy"}
    assert consensus_filter(a, b, limit=2).ids == ["s2"]
    assert consensus_filter(a, b, limit=0).ids == []
    with pytest.raises(ValueError):
        consensus_filter(a, b, limit=-1)


@given(st.integers(0, 10_000), st.integers(1, 80))
@settings(max_examples=60, deadline=None)
def test_consensus_properties(seed, n):
    rng = np.random.default_rng(seed)
    ids_a = [f"x{i}" for i in rng.choice(120, size=n, replace=False)]
    ids_b = [f"x{i}" for i in rng.choice(120, size=int(rng.integers(1, 120)), replace=False)]
    a = PredictionSet(ids_a, np.eye(6)[rng.integers(0, 6, size=len(ids_a))])
    b = {sid: int(rng.integers(0, 6)) for sid in ids_b}
    ps = consensus_filter(a, b)
    assert set(ps.ids) <= set(ids_a) & set(ids_b)
    assert len(ps) <= min(len(ids_a), len(ids_b))
    assert all(a.as_dict()[sid] == b[sid] == lab for sid, lab in zip(ps.ids, ps.labels))
    # retained order follows the model predictions
    pos = {sid: i for i, sid in enumerate(ids_a)}
    assert [pos[s] for s in ps.ids] == sorted(pos[s] for s in ps.ids)
    # idempotent against either source
    again = consensus_filter(preds(ps.label_map()), b)
    assert again.ids == ps.ids
    again = consensus_filter(a.align(a.ids), {sid: lab for sid, lab in zip(ps.ids, ps.labels)})
    assert again.ids == ps.ids
    # adding samples to both sources keeps previous retentions
    extra_ids = [f"y{i}" for i in range(5)]
    extra = np.eye(6)[rng.integers(0, 6, size=5)]
    bigger = PredictionSet(ids_a + extra_ids, np.vstack([a.probs, extra]))
    b2 = dict(b, **{sid: int(rng.integers(0, 6)) for sid in extra_ids})
    assert set(ps.ids) <= set(consensus_filter(bigger, b2).ids)


def test_consensus_beats_each_source():
    accs = []
    for seed in range(5):
        y = sample_labels(4000, [1 / 6] * 6, seed)
        ids = sample_ids(len(y))
        m = gen_noisy_predictions(y, symmetric_confusion(0.7), 2 * seed, ids)
        v = gen_noisy_predictions(y, symmetric_confusion(0.65), 2 * seed + 1, ids)
        ps = consensus_filter(m, dict(zip(ids, v.labels.tolist())))
        truth = dict(zip(ids, y))
        accs.append(np.mean([truth[s] == lab for s, lab in zip(ps.ids, ps.labels)]))
    # independent errors: P(correct | agree) = .7*.65 / (.7*.65 + 5 * (.3/5) * (.35/5))
    expected = 0.455 / (0.455 + 5 * 0.06 * 0.07)
    assert np.median(accs) == pytest.approx(expected, abs=0.02)
    assert np.median(accs) > 0.7


def test_agreement_identical_sources():
    a = preds({"a": "sad", "b": "happy", "c": "sad"})
    rep = agreement_report(a, {"a": "sad", "b": "happy", "c": "sad"})
    assert rep["agreement"] == 1.0
    cm = np.array(rep["confusion"])
    assert (cm == np.diag(np.diag(cm))).all() and cm.sum() == 3
    assert rep["retained_distribution"]["sad"] == pytest.approx(2 / 3)
    assert sum(rep["retained_distribution"].values()) == pytest.approx(1.0, abs=1e-9)


def test_agreement_of_uniform_labelers():
    n = 12_000
    y = sample_labels(n, [1 / 6] * 6, 0)
    ids = sample_ids(n)
    a = gen_noisy_predictions(y, uniform_confusion(), 1, ids)
    b = gen_noisy_predictions(y, uniform_confusion(), 2, ids)
    rep = agreement_report(a, dict(zip(ids, b.labels.tolist())))
    sigma = np.sqrt((1 / 6) * (5 / 6) / n)
    assert abs(rep["agreement"] - 1 / 6) < 3 * sigma


def small_bundle(n=12):
    return gen_bundle(SynthConfig(n=n, branches=[SynthBranch("v", "vector", 3),
                                                 SynthBranch("au", "sequence", 4, t_min=1, t_max=3)], seed=1))


def test_export_pseudo_bundle(tmp_path):
    bundle = small_bundle()
    unlabeled = bundle.with_labels({})
    model = PredictionSet(bundle.ids, np.eye(6)[bundle.label_indices()])
    full = consensus_filter(model, {s: EMOTIONS[k] for s, k in zip(bundle.ids, bundle.label_indices())})
    exported = export_pseudo_bundle(full, unlabeled)
    assert exported.equals(bundle)
    write_bundle(exported, tmp_path / "b")
    assert read_bundle(tmp_path / "b").labels == bundle.labels
    empty = export_pseudo_bundle(consensus_filter(model, {}), unlabeled)
    assert len(empty) == 0


def test_export_missing_id():
    ps = consensus_filter(preds({"zzz": "sad"}), {"zzz": "sad"})
    with pytest.raises(DataFormatError):
        export_pseudo_bundle(ps, small_bundle())


def test_pseudo_set_round_trip(tmp_path):
    ps = consensus_filter(preds({"s1": "happy", "s2": "neutral", "s3": "angry"}),
                          {"s1": "happy", "s2": "sad", "s3": "angry"})
    write_pseudo_set(ps, tmp_path / "p.jsonl")
    back = read_pseudo_set(tmp_path / "p.jsonl")
    assert back.ids == ps.ids and back.labels == ps.labels and back.provenance == ps.provenance
    (tmp_path / "bad.jsonl").write_text('{"id": "a", "label": "sad", "model_label": "sad", "vlm_label": "happy"}\n')
    with pytest.raises(DataFormatError):
        read_pseudo_set(tmp_path / "bad.jsonl")
