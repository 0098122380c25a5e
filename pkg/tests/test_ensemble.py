import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from moe_affect.data import DataFormatError, PredictionSet
from moe_affect.ensemble import (RerankRuleSet, VoteMass, compute_reliability, distribution, distribution_report,
                                 format_distribution_table, read_vote_mass, reliability_table, rerank,
                                 weighted_vote, write_vote_mass)
from moe_affect.synth import VALID_DISTRIBUTION, sample_ids
from moe_affect.taxonomy import ANGRY, EMOTIONS, HAPPY, NEUTRAL, SAD, SURPRISED

REPORTED_VALID_ROW = {"neutral": 24.8, "angry": 24.0, "happy": 20.6, "sad": 14.5, "worried": 12.2, "surprised": 3.8}


def onehots(labels):
    return PredictionSet(sample_ids(len(labels)), np.eye(6)[labels])


# --- reliability ----------------------------------------------------------------

@pytest.mark.parametrize("pred, truth, r", [
    ([0, 1, 2, 3], [0, 1, 2, 3], 1.0),
    ([0, 1, 2, 3], [0, 1, 2, 5], 0.75),
    ([1, 1, 1, 1], [0, 0, 0, 0], 0.0),
])
def test_reliability_is_accuracy(pred, truth, r):
    ps = onehots(pred)
    assert compute_reliability(ps, dict(zip(ps.ids, truth))) == r


def test_reliability_accepts_label_names():
    ps = onehots([0, 2])
    assert compute_reliability(ps, dict(zip(ps.ids, ["neutral", "sad"]))) == 0.5


def test_reliability_rejects_mismatch_and_empty():
    ps = onehots([0, 2])
    with pytest.raises(DataFormatError):
        compute_reliability(ps, {ps.ids[0]: 0})
    with pytest.raises(ValueError):
        compute_reliability(PredictionSet([], np.zeros((0, 6))), {})


def test_reliability_table():
    a, b = onehots([0, 1]), onehots([0, 0])
    table = reliability_table({"a": a, "b": b}, dict(zip(a.ids, [0, 1])))
    assert table.entries == {"a": 1.0, "b": 0.5}
    assert table.n_eval == 2


# --- weighted vote -----------------------------------------------------------------

def test_two_expert_hand_example():
    a = PredictionSet(["x"], [[0.5, 0.5, 0, 0, 0, 0]])
    b = PredictionSet(["x"], [[0, 0.2, 0.8, 0, 0, 0]])
    ps, vote = weighted_vote([(a, 0.8), (b, 0.5)])
    np.testing.assert_allclose(vote.mass[0], [0.40, 0.50, 0.40, 0, 0, 0], atol=1e-15)
    assert ps.labels[0] == ANGRY


def test_single_expert_keeps_labels(rng):
    ps = PredictionSet(sample_ids(30), rng.dirichlet(np.ones(6), size=30))
    out, _ = weighted_vote([(ps, 0.3)])
    assert np.array_equal(out.labels, ps.labels)
    np.testing.assert_allclose(out.probs, ps.probs, atol=1e-15)


def test_vote_ties_go_to_lower_index():
    a = PredictionSet(["x"], [[0, 0.5, 0, 0.5, 0, 0]])
    ps, vote = weighted_vote([(a, 1.0)])
    assert ps.labels[0] == ANGRY
    assert list(vote.ranking[0][:2]) == [ANGRY, SAD]


def test_count_mode_counts_weighted_argmaxes():
    e1 = PredictionSet(["x"], [[0.4, 0.3, 0.3, 0, 0, 0]])
    e2 = PredictionSet(["x"], [[0.1, 0.5, 0.4, 0, 0, 0]])
    e3 = PredictionSet(["x"], [[0.1, 0.45, 0.45, 0, 0, 0]])
    ps, vote = weighted_vote([(e1, 0.9), (e2, 0.5), (e3, 0.3)], mode="count")
    np.testing.assert_allclose(vote.mass[0], [0.9, 0.8, 0, 0, 0, 0])
    assert ps.labels[0] == NEUTRAL


@given(st.integers(0, 10_000), st.sampled_from([0.1, 3.0, 100.0]))
@settings(max_examples=40, deadline=None)
def test_vote_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    ids = sample_ids(20)
    experts = [(PredictionSet(ids, rng.dirichlet(np.ones(6), size=20)), float(rng.uniform(0.1, 1)))
               for _ in range(int(rng.integers(1, 5)))]
    a, va = weighted_vote(experts)
    b, vb = weighted_vote([(p, r * c) for p, r in experts])
    assert np.array_equal(a.labels, b.labels)
    np.testing.assert_allclose(va.share, vb.share, atol=1e-12)


@pytest.mark.parametrize("rels", [[0.0, 0.0], [-0.1, 0.5], [float("nan"), 0.5]])
def test_vote_rejects_bad_reliabilities(rels, rng):
    ps = onehots([0, 1])
    with pytest.raises(ValueError):
        weighted_vote([(ps, r) for r in rels])


def test_vote_rejects_misaligned_experts():
    a = PredictionSet(["x", "y"], np.eye(6)[[0, 1]])
    b = PredictionSet(["y", "x"], np.eye(6)[[0, 1]])
    with pytest.raises(DataFormatError):
        weighted_vote([(a, 1.0), (b, 1.0)])
    with pytest.raises(ValueError):
        weighted_vote([(a, 1.0)], mode="median")


def test_vote_mass_invariants(rng):
    vote = VoteMass(sample_ids(50), rng.uniform(0, 3, size=(50, 6)))
    np.testing.assert_allclose(vote.share.sum(axis=1), 1.0, atol=1e-12)
    ranked = np.take_along_axis(vote.share, vote.ranking, axis=1)
    assert (np.diff(ranked, axis=1) <= 0).all()
    with pytest.raises(DataFormatError):
        VoteMass(["x"], [np.zeros(6)])


# --- re-ranking -------------------------------------------------------------------

def rerank_row(row, vlm=None, tau=0.25, rules=(1, 2, 3)):
    vote = VoteMass(["x"], [row])
    ps, changes = rerank(vote, {} if vlm is None else {"x": vlm}, RerankRuleSet(tau, rules))
    return int(ps.labels[0]), (changes[0].rule if changes else None), ps


def test_rule1_angry_second():
    assert rerank_row([0.45, 0.20, 0.15, 0.1, 0.1, 0.0])[:2] == (ANGRY, 1)


def test_rule2_share_above_quarter():
    assert rerank_row([0.40, 0.1, 0.30, 0.1, 0.1, 0.0])[:2] == (HAPPY, 2)


def test_rule3_vlm_label():
    assert rerank_row([0.60, 0.05, 0.05, 0.15, 0.1, 0.05], vlm=SURPRISED)[:2] == (SURPRISED, 3)


def test_non_neutral_top_unchanged():
    for vlm in (None, ANGRY, HAPPY):
        assert rerank_row([0.3, 0.1, 0.1, 0.4, 0.1, 0.0], vlm=vlm)[:2] == (SAD, None)


@pytest.mark.parametrize("delta, fires", [(-1e-9, False), (0.0, False), (1e-9, True)])
def test_rule2_boundary_is_strict(delta, fires):
    second = 0.25 + delta
    row = [0.6, 0.0, 0.0, second, 0.4 - second, 0.0]
    label, rule, _ = rerank_row(row, rules=(2,))
    assert (rule == 2) is fires
    assert label == (SAD if fires else NEUTRAL)


def test_vlm_label_names_accepted():
    vote = VoteMass(["x"], [[0.8, 0, 0, 0.2, 0, 0]])
    ps, changes = rerank(vote, {"x": "happy"})
    assert ps.labels[0] == HAPPY and changes[0].to_dict() == {"id": "x", "from": "neutral", "to": "happy", "rule": 3}


def test_rerank_output_keeps_label_as_argmax():
    _, rule, ps = rerank_row([0.6, 0.05, 0.1, 0.1, 0.1, 0.05], vlm=HAPPY)
    assert rule == 3
    np.testing.assert_allclose(ps.probs[0], [0.1, 0.05, 0.6, 0.1, 0.1, 0.05], atol=1e-15)
    # exact tie between the promoted class and a rival is broken in its favour
    label, _, ps = rerank_row([0.4, 0.4, 0.2, 0, 0, 0])
    assert label == ANGRY and ps.probs[0, ANGRY] > ps.probs[0, NEUTRAL]


@given(st.integers(0, 100_000))
@settings(max_examples=200, deadline=None)
def test_rerank_properties(seed):
    rng = np.random.default_rng(seed)
    n = 20
    ids = sample_ids(n)
    vote = VoteMass(ids, rng.dirichlet(np.full(6, 0.8), size=n) * rng.uniform(0.1, 5, size=(n, 1)))
    vlm = {sid: int(rng.integers(0, 6)) for sid in ids if rng.random() < 0.7}
    rules = RerankRuleSet(float(rng.uniform(0.05, 0.6)))
    ps, changes = rerank(vote, vlm, rules)
    changed = {c.id for c in changes}
    for i, sid in enumerate(ids):
        if vote.top[i] != NEUTRAL:
            assert sid not in changed and ps.labels[i] == vote.top[i]
        assert ps.probs[i, NEUTRAL] <= vote.share[i, NEUTRAL]
    assert distribution(ps.labels)[NEUTRAL] <= distribution(vote.top)[NEUTRAL]
    # deterministic, and a fixed point on its own output
    again, changes2 = rerank(vote, vlm, rules)
    assert again.equals(ps) and changes2 == changes
    ps3, changes3 = rerank(VoteMass(ids, ps.probs), vlm, rules)
    moved = [i for i, sid in enumerate(ids) if sid in changed]
    assert np.array_equal(ps3.labels[moved], ps.labels[moved])


def test_tau_above_one_disables_rule2(rng):
    ids = sample_ids(300)
    vote = VoteMass(ids, rng.dirichlet(np.full(6, 0.5), size=300) + np.eye(6)[np.zeros(300, int)] * 0.5)
    vlm = {sid: int(rng.integers(0, 6)) for sid in ids}
    _, changes = rerank(vote, vlm, RerankRuleSet(1.1))
    assert changes and {c.rule for c in changes} <= {1, 3}


# --- distribution reporting -------------------------------------------------------------

def test_valid_row_format():
    counts = [248, 240, 206, 145, 122, 38]
    labels = np.repeat(np.arange(6), counts)
    assert distribution_report(labels) == REPORTED_VALID_ROW
    assert dict(zip(EMOTIONS, VALID_DISTRIBUTION)) == REPORTED_VALID_ROW


def test_all_neutral_distribution():
    assert distribution_report(["neutral"] * 7) == {"neutral": 100.0, **{e: 0.0 for e in EMOTIONS[1:]}}
    with pytest.raises(ValueError):
        distribution([])


@given(st.lists(st.integers(0, 5), min_size=1, max_size=500))
def test_distribution_sums_to_100(labels):
    rep = distribution_report(labels)
    assert abs(sum(rep.values()) - 100.0) <= 0.3
    counts = np.bincount(labels, minlength=6)
    for k, name in enumerate(EMOTIONS):
        assert rep[name] == round(100 * counts[k] / len(labels), 1)


def test_distribution_table_layout():
    text = format_distribution_table({"valid": np.repeat(np.arange(6), [248, 240, 206, 145, 122, 38])})
    lines = text.splitlines()
    assert lines[0].split("|")[1].split() == ["neu", "ang", "hap", "sad", "wor", "sur"]
    assert lines[2].split("|")[1].split() == ["24.8%", "24.0%", "20.6%", "14.5%", "12.2%", "3.8%"]


def test_vote_mass_round_trip(tmp_path, rng):
    vote = VoteMass(sample_ids(10), rng.uniform(0, 2, size=(10, 6)))
    write_vote_mass(vote, tmp_path / "vm.jsonl")
    back = read_vote_mass(tmp_path / "vm.jsonl")
    assert back.ids == vote.ids
    assert back.mass.tobytes() == vote.mass.tobytes()
    assert np.array_equal(back.ranking, vote.ranking)
