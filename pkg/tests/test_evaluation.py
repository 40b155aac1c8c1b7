import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedretrieval.data import pool, synth_dataset
from fedretrieval.errors import ConfigError
from fedretrieval.evaluation import (
    RecallReport,
    batch_ranks,
    batch_recall,
    fixed_batches,
    global_ranks,
    global_recall,
    mean_pairwise_cosine,
    performance_drop,
)
from fedretrieval.model import ModelConfig, encode_context, init_params, score_all_items

from conftest import random_batch


def brute_global_rank(table, context, label):
    f, _ = encode_context(table, context)
    scores = score_all_items(table, f)
    ahead = [v for v in range(1, table.shape[0])
             if scores[v] > scores[label] or (scores[v] == scores[label] and v < label)]
    return 1 + len(ahead)


def test_global_ranks_match_brute_force(small_table, rng):
    contexts, labels = random_batch(rng, 50, 30)
    expected = [brute_global_rank(small_table, c, y) for c, y in zip(contexts, labels)]
    assert global_ranks(small_table, contexts, labels, chunk=7).tolist() == expected


def test_perfect_model_recall_at_1():
    table = np.zeros((6, 5))
    table[1:] = np.eye(5)
    contexts = np.array([[0, i] for i in range(1, 6)])
    report = global_recall(table, contexts, np.arange(1, 6))
    assert report.recalls == (100.0, 100.0, 100.0)


def test_sixth_ranked_label():
    # item k scores 1 - k/100 against the context, so item 6 ranks 6th
    dim, vocab = 2, 12
    table = np.zeros((vocab, dim))
    angles = np.linspace(0, 1.0, vocab - 1)
    table[1:] = np.column_stack([np.cos(angles), np.sin(angles)])
    report = global_recall(table, np.array([[0, 1]]), np.array([6]))
    assert report.recalls == (0.0, 0.0, 100.0)


def test_ties_go_to_lower_id():
    table = np.zeros((4, 2))
    table[1:] = [1.0, 0.0]
    assert global_ranks(table, np.array([[0, 1]] * 3), np.array([1, 2, 3])).tolist() == [1, 2, 3]


def test_global_recall_independent_of_chunking(small_table, rng):
    contexts, labels = random_batch(rng, 50, 40)
    a = global_ranks(small_table, contexts, labels, chunk=3)
    b = global_ranks(small_table, contexts, labels, chunk=4096)
    assert np.array_equal(a, b)


def test_global_recall_empty_raises(small_table):
    with pytest.raises(ConfigError):
        global_recall(small_table, np.zeros((0, 10), int), np.zeros(0, int))


def test_chance_level_global_recall():
    vocab, n = 201, 10_000
    table = init_params(ModelConfig(vocab, 16), 0)
    rng = np.random.default_rng(0)
    contexts, labels = random_batch(rng, vocab, n)
    report = global_recall(table, contexts, labels)
    for k, r in zip(report.ks, report.recalls):
        p = k / (vocab - 1)
        sigma = 100 * np.sqrt(p * (1 - p) / n)
        assert abs(r - 100 * p) <= 3 * sigma


def test_batch_recall_own_label_wins():
    table = np.zeros((3, 2))
    table[1:] = np.eye(2)
    report = batch_recall(table, [(np.array([[0, 1], [0, 2]]), np.array([1, 2]))])
    assert report.at(1) == 100.0


def test_batch_recall_identical_labels_always_hit(small_table):
    contexts = np.arange(1, 41).reshape(4, 10)
    assert batch_recall(small_table, [(contexts, np.full(4, 9))]).at(1) == 100.0


def test_batch_ranks_brute_force(small_table, rng):
    contexts, labels = random_batch(rng, 50, 16)
    f, _ = encode_context(small_table, contexts)
    scores = score_all_items(small_table, f[0])
    own = scores[labels[0]]
    expected = 1 + sum(1 for y in labels if scores[y] > own or (scores[y] == own and y < labels[0]))
    assert batch_ranks(small_table, contexts, labels)[0] == expected


def test_chance_level_batch_recall():
    table = init_params(ModelConfig(1001, 16), 1)
    rng = np.random.default_rng(1)
    n = 16_000
    contexts, labels = random_batch(rng, 1001, n)
    batches = [(contexts[i : i + 16], labels[i : i + 16]) for i in range(0, n, 16)]
    r1 = batch_recall(table, batches).at(1)
    sigma = 100 * np.sqrt((1 / 16) * (15 / 16) / n)
    assert abs(r1 - 100 / 16) <= 4 * sigma


def test_batch_recall_small_batch_is_trivial(small_table):
    report = batch_recall(small_table, [(np.ones((3, 10), int), np.array([1, 2, 3]))])
    assert report.at(5) == 100.0 and report.at(10) == 100.0


def test_batch_recall_empty_raises(small_table):
    with pytest.raises(ConfigError):
        batch_recall(small_table, [])


def test_fixed_batches_cover_everything():
    ex = pool(synth_dataset(4, 30, 1.0, seed=0))
    batches = list(fixed_batches(ex, 16, seed=3))
    assert sum(len(y) for _, y in batches) == len(ex)
    assert sorted(np.concatenate([y for _, y in batches])) == sorted(ex.labels)
    again = list(fixed_batches(ex, 16, seed=3))
    assert all(np.array_equal(a[1], b[1]) for a, b in zip(batches, again))


@pytest.mark.parametrize("rc,rf,expected", [(1.02, 0.58, 43.14), (9.46, 9.41, 0.53), (5.0, 5.0, 0.0)])
def test_performance_drop(rc, rf, expected):
    assert round(performance_drop(rc, rf), 2) == expected


def test_performance_drop_zero_central():
    with pytest.raises(ConfigError):
        performance_drop(0.0, 1.0)


@pytest.mark.parametrize("recalls", [(5.0, 3.0, 10.0), (-1.0, 2.0, 3.0), (1.0, 2.0, 101.0)])
def test_report_asserts_invariants(recalls):
    with pytest.raises(AssertionError):
        RecallReport((1, 5, 10), recalls, "global", 1)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_reports_monotone_and_deterministic(seed):
    table = init_params(ModelConfig(30, 4), seed)
    rng = np.random.default_rng(seed)
    contexts, labels = random_batch(rng, 30, 20)
    a = global_recall(table, contexts, labels, ks=(1, 2, 5, 10))
    assert a == global_recall(table, contexts, labels, ks=(1, 2, 5, 10))
    assert list(a.recalls) == sorted(a.recalls)


def test_ks_must_ascend(small_table, rng):
    contexts, labels = random_batch(rng, 50, 4)
    with pytest.raises(ConfigError):
        global_recall(small_table, contexts, labels, ks=(5, 1))


def test_mean_pairwise_cosine_extremes():
    collapsed = np.ones((5, 3))
    assert mean_pairwise_cosine(collapsed) == pytest.approx(1.0)
    ortho = np.vstack([np.zeros(4), np.eye(4)])
    assert mean_pairwise_cosine(ortho) == pytest.approx(0.0)
