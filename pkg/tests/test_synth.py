import numpy as np
import pytest

from moe_affect.data import read_vlm_records, write_vlm_records
from moe_affect.synth import (AU_DIM, VALID_PRIOR, SynthBranch, SynthConfig, SynthConfigError, default_branches,
                              gen_bundle, gen_noisy_predictions, gen_soft_predictions, gen_vlm_records,
                              sample_ids, sample_labels, smoothed_onehot, symmetric_confusion)


def test_bundle_is_seeded():
    cfg = SynthConfig(n=50, seed=3)
    a, b = gen_bundle(cfg), gen_bundle(SynthConfig(n=50, seed=3))
    assert a.equals(b)
    assert not a.equals(gen_bundle(SynthConfig(n=50, seed=4)))


def test_default_bundle_shape():
    b = gen_bundle(SynthConfig(n=40))
    assert [s.name for s in b.branches] == ["audio", "face", "text", "au"]
    assert b.data["audio"].shape == (40, 24)
    assert all(4 <= s.shape[0] <= 12 and s.shape[1] == AU_DIM for s in b.data["au"])
    assert b.is_labeled


def test_label_prior_is_respected():
    y = sample_labels(60_000, VALID_PRIOR, 0)
    shares = np.bincount(y, minlength=6) / len(y)
    np.testing.assert_allclose(shares, VALID_PRIOR, atol=0.01)


def test_uninformative_branch_carries_no_class_signal():
    cfg = SynthConfig(n=3000, branches=[SynthBranch("u", "vector", 4, 3.0, 1.0, informative=False),
                                        SynthBranch("i", "vector", 4, 3.0, 1.0)], seed=2)
    b = gen_bundle(cfg)
    y = b.label_indices()
    means_u = np.array([b.data["u"][y == k].mean(axis=0) for k in range(6)])
    means_i = np.array([b.data["i"][y == k].mean(axis=0) for k in range(6)])
    assert np.ptp(means_u, axis=0).max() < 0.5
    assert np.ptp(means_i, axis=0).max() > 2.0


def test_labels_override_prior():
    b = gen_bundle(SynthConfig(n=0, seed=1), labels=[5, 5, 0])
    assert b.label_indices().tolist() == [5, 5, 0]


@pytest.mark.parametrize("kw", [
    {"prior": [0.5, 0.5, 0, 0, 0, 0.1]},
    {"n": -1},
    {"model_confusion": np.eye(5).tolist()},
    {"branches": [SynthBranch("x", noise=0.0)]},
    {"branches": [SynthBranch("x", "sequence", t_min=0, t_max=2)]},
])
def test_bad_synth_config(kw):
    with pytest.raises(SynthConfigError):
        SynthConfig(**kw)


def test_noisy_labeler_accuracy():
    y = sample_labels(30_000, VALID_PRIOR, 1)
    ps = gen_noisy_predictions(y, symmetric_confusion(0.7), seed=5)
    assert np.mean(ps.labels == y) == pytest.approx(0.7, abs=0.01)
    np.testing.assert_allclose(ps.probs.max(axis=1), 0.95 + 0.05 / 6)
    np.testing.assert_allclose(ps.probs.sum(axis=1), 1.0, atol=1e-12)


def test_perfect_labeler():
    y = np.array([0, 3, 5, 2])
    ps = gen_noisy_predictions(y, np.eye(6), seed=0)
    assert ps.labels.tolist() == y.tolist()
    np.testing.assert_allclose(ps.probs, smoothed_onehot(y))


def test_soft_labeler_keeps_sampled_label():
    y = sample_labels(500, VALID_PRIOR, 2)
    hard = gen_noisy_predictions(y, symmetric_confusion(0.8), seed=7)
    soft = gen_soft_predictions(y, symmetric_confusion(0.8), seed=7, truth_boost=1.0)
    assert np.array_equal(hard.labels, soft.labels)
    # on mistakes, the boosted true class tends to be the runner-up
    wrong = soft.labels != y
    second = np.argsort(-soft.probs, axis=1, kind="stable")[:, 1]
    assert np.mean(second[wrong] == y[wrong]) > 0.4


def test_vlm_records_are_schema_complete(tmp_path):
    ps = gen_noisy_predictions(np.array([0, 1, 2]), np.eye(6), seed=0, ids=sample_ids(3, "v"))
    recs = gen_vlm_records(ps, seed=1)
    assert [r.label for r in recs] == ["neutral", "angry", "happy"]
    assert all(abs(sum(r.modality_contribution.values()) - 1) < 1e-9 for r in recs)
    write_vlm_records(recs, tmp_path / "v.jsonl")
    assert read_vlm_records(tmp_path / "v.jsonl") == recs


def test_default_branches_include_au_sequence():
    kinds = {b.name: b.kind for b in default_branches()}
    assert kinds["au"] == "sequence"


def test_seeds_share_the_task_unless_task_seed_changes():
    branches = [SynthBranch("v", dim=4, separation=4.0, noise=0.1)]

    def class_means(**kw):
        b = gen_bundle(SynthConfig(n=600, branches=branches, **kw))
        y = b.label_indices()
        return np.stack([b.data["v"][y == k].mean(axis=0) for k in range(6)])

    a = class_means(seed=1)
    np.testing.assert_allclose(class_means(seed=2), a, atol=0.05)
    assert np.abs(class_means(seed=1, task_seed=1) - a).max() > 1.0
