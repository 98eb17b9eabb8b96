import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lpfl.data import Example, build_tokenizer
from lpfl.federation import ClientState
from lpfl.model import MicroMLM
from lpfl.prompting import PromptTask, bundled_patterns
from lpfl.semisup import (
    AnnotationError,
    AnnotationPolicy,
    annotate_round,
    annotation_quota,
    combine_patterns,
    gate,
    soft_label,
    soft_labels,
)
from helpers import tiny_model_config

IMDB = bundled_patterns("imdb")


@pytest.fixture(scope="module")
def task():
    words = [f"w{i}" for i in range(20)]
    tok = build_tokenizer([" ".join(words)], 80, IMDB.verbalizer.all_words(), IMDB.pattern_words())
    return PromptTask.from_set(IMDB, tok, 32)


@pytest.fixture(scope="module")
def model(task):
    m = MicroMLM.initialize(tiny_model_config(vocab_size=len(task.tokenizer), max_len=32), seed=1, mask_id=task.tokenizer.mask_id)
    rng = np.random.default_rng(2)
    for ad in m.adapters.values():
        ad.B.data = rng.normal(0, 0.5, size=ad.B.shape)
    return m


def make_client(n_unlabeled=100, seed=0):
    rng = np.random.default_rng(seed)
    unl = [Example(1000 + i, " ".join(f"w{j}" for j in rng.integers(0, 20, size=5))) for i in range(n_unlabeled)]
    return ClientState(0, [Example(0, "w1 w2", 1)], unl, n_unlabeled)


def test_worked_example_two_patterns():
    per = np.array([[[0.9, 0.1]], [[0.5, 0.5]]])
    out = combine_patterns(per, [0.8, 0.6])[0]
    np.testing.assert_allclose(out, [0.7286, 0.2714], atol=1e-4)


def test_single_pattern_collapses_to_softmax(model, task):
    one = PromptTask(task.tokenizer, task.patterns[:1], task.verbalizer, task.max_len)
    raw = one.raw_scores(model, ["w1 w3"])[0, 0]
    expected = np.exp(raw - raw.max()) / np.exp(raw - raw.max()).sum()
    np.testing.assert_allclose(soft_label(model, one, [0.37], "w1 w3"), expected, rtol=0, atol=1e-15)


def test_agreeing_patterns_are_a_fixed_point():
    d = np.array([0.3, 0.7])
    out = combine_patterns(np.tile(d, (4, 1, 1)), [0.9, 0.1, 0.5, 0.7])
    np.testing.assert_allclose(out[0], d, rtol=0, atol=1e-15)


def test_combine_errors():
    per = np.full((2, 1, 2), 0.5)
    with pytest.raises(ValueError):
        combine_patterns(per, [0.0, 0.0])
    with pytest.raises(ValueError):
        combine_patterns(per, [1.0])
    with pytest.raises(ValueError):
        combine_patterns(per, [1.0, -0.1])
    with pytest.raises(ValueError):
        combine_patterns(per, [1.0, 1.0], combine="median")


def test_raw_combination_averages_scores_then_normalises():
    raw = np.array([[[2.0, 0.0]], [[0.0, 1.0]]])
    mixed = (0.8 * raw[0] + 0.6 * raw[1]) / 1.4
    expected = np.exp(mixed) / np.exp(mixed).sum()
    np.testing.assert_allclose(combine_patterns(raw, [0.8, 0.6], "raw"), expected, rtol=0, atol=1e-15)


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 4, 2), elements=st.floats(-30, 30)),
    arrays(np.float64, 3, elements=st.floats(0.01, 1.0)),
)
def test_soft_labels_lie_in_simplex(scores, weights):
    probs = np.exp(scores - scores.max(axis=-1, keepdims=True))
    probs /= probs.sum(axis=-1, keepdims=True)
    for per, mode in ((probs, "softmax"), (scores, "raw")):
        out = combine_patterns(per, weights, mode)
        assert np.all(out >= 0) and np.allclose(out.sum(axis=-1), 1.0, atol=1e-12)


@pytest.mark.parametrize("acc,expected", [(0.71, True), (0.70, False), (0.0, False), (1.0, True)])
def test_gate_is_strict(acc, expected):
    assert gate(acc, AnnotationPolicy()) is expected


def test_disabled_gate_always_opens():
    assert gate(0.0, AnnotationPolicy(gate_enabled=False))


def test_schedule_100_75_50_25_0(model, task):
    client = make_client()
    sizes = [len(client.unlabeled)]
    for g in range(1, 5):
        annotate_round(client, model, task, [0.9, 0.8, 0.7, 0.6], AnnotationPolicy(), g, 5, np.random.default_rng(g), True)
        sizes.append(len(client.unlabeled))
        assert len(client.labeled) + len(client.unlabeled) == 101
    assert sizes == [100, 75, 50, 25, 0]
    assert annotate_round(client, model, task, [1, 1, 1, 1], AnnotationPolicy(), 5, 5, np.random.default_rng(0), True) == []


def test_blocked_quota_rolls_forward_and_final_round_forces():
    p = AnnotationPolicy()
    assert annotation_quota(100, 0, 100, 1, 5, p, False) == 0
    assert annotation_quota(100, 0, 100, 2, 5, p, True) == 50
    assert annotation_quota(100, 50, 50, 3, 5, p, False) == 0
    assert annotation_quota(100, 50, 50, 5, 5, p, False) == 50
    with pytest.raises(AnnotationError):
        annotation_quota(100, 50, 50, 5, 5, AnnotationPolicy(force_complete=False), True)
    assert annotation_quota(100, 100, 0, 5, 5, AnnotationPolicy(force_complete=False), True) == 0


def test_quota_uses_ceiling_of_original_pool():
    p = AnnotationPolicy()
    assert [annotation_quota(10, a, 10 - a, g, 5, p, True) for g, a in ((1, 0), (2, 3), (3, 6), (4, 9))] == [3, 3, 3, 1]


@settings(max_examples=80, deadline=None)
@given(st.integers(1, 500), st.integers(2, 8), st.lists(st.booleans(), min_size=8, max_size=8), st.floats(0.05, 1.0))
def test_any_gate_sequence_exhausts_pool_before_final_training(u, rounds, gates, fraction):
    p = AnnotationPolicy(fraction=fraction)
    annotated = 0
    for g in range(1, rounds + 1):
        n = annotation_quota(u, annotated, u - annotated, g, rounds, p, gates[g - 1])
        assert 0 <= n <= u - annotated
        annotated += n
    assert annotated == u


def test_selection_is_seeded_and_disjoint(model, task):
    picks = []
    for _ in range(2):
        c = make_client(40)
        annotate_round(c, model, task, [1, 1, 1, 1], AnnotationPolicy(), 1, 5, np.random.default_rng(9), True)
        picks.append([e.id for e in c.labeled[1:]])
        assert not {e.id for e in c.labeled} & {e.id for e in c.unlabeled}
        assert all(e.origin == "annotated" and e.annotated_round == 1 for e in c.labeled[1:])
    assert picks[0] == picks[1] and len(picks[0]) == 10


def test_annotation_matches_ensemble_and_audit(model, task):
    c = make_client(20)
    weights = [0.9, 0.5, 0.7, 0.6]
    records = annotate_round(c, model, task, weights, AnnotationPolicy(), 1, 3, np.random.default_rng(0), True)
    texts = [e.text for e in c.labeled[1:]]
    expected = soft_labels(model, task, weights, texts)
    np.testing.assert_array_equal(np.array([e.soft for e in c.labeled[1:]]), expected)
    assert [r.example_id for r in records] == [e.id for e in c.labeled[1:]]
    assert all(r.pattern_weights == tuple(weights) for r in records)


def test_empty_pool_is_a_noop(model, task):
    c = make_client(0)
    assert annotate_round(c, model, task, [1, 1, 1, 1], AnnotationPolicy(), 1, 5, np.random.default_rng(0), True) == []


def test_policy_violations():
    assert AnnotationPolicy().violations() == []
    bad = AnnotationPolicy(fraction=0.0, gate=1.5, combine="x").violations()
    assert len(bad) == 3
