import itertools

import numpy as np
import pytest

from fedretrieval.errors import ConfigError
from fedretrieval.losses import (
    KINDS,
    LossConfig,
    batch_softmax,
    certify_batch_insensitive,
    compose,
    even_partition,
    global_softmax,
    hinge,
    spreadout,
)
from fedretrieval.model import ModelConfig, encode_context, encode_item, init_params
from fedretrieval.numerics import grad_check, l2_normalize

from conftest import random_batch


def away_from_kink(table, rng, margin=0.9, size=16):
    while True:
        contexts, labels = random_batch(rng, table.shape[0], size)
        f, _ = encode_context(table, contexts)
        s = np.sum(f * encode_item(table, labels), axis=1)
        if np.all(np.abs(margin - s) >= 1e-3):
            return contexts, labels


def brute_spreadout(table, distance="euclidean", include_pad=False):
    w = l2_normalize(table[0 if include_pad else 1 :])
    total, n = 0.0, len(w)
    for i, j in itertools.permutations(range(n), 2):
        if distance == "euclidean":
            total -= np.sum((w[i] - w[j]) ** 2)
        else:
            total += (w[i] @ w[j]) ** 2
    return total / (n * (n - 1))


def brute_batch_softmax(table, contexts, labels):
    f, _ = encode_context(table, contexts)
    g = encode_item(table, labels)
    total = 0.0
    for i in range(len(labels)):
        logits = [f[i] @ g[j] for j in range(len(labels))]
        total -= logits[i] - np.log(np.sum(np.exp(logits)))
    return total / len(labels)


def brute_global_softmax(table, contexts, labels):
    f, _ = encode_context(table, contexts)
    total = 0.0
    for i, y in enumerate(labels):
        logits = [f[i] @ encode_item(table, v) for v in range(1, table.shape[0])]
        total -= logits[y - 1] - np.log(np.sum(np.exp(logits)))
    return total / len(labels)


# batch softmax

def test_batch_softmax_uniform_is_ln2():
    table = np.zeros((3, 2))
    table[1:] = [1.0, 0.0]
    out = batch_softmax(table, np.array([[0, 1], [0, 2]]), np.array([1, 2]))
    assert out.value == pytest.approx(np.log(2), abs=1e-15)


def test_batch_softmax_matches_loop(small_table, rng):
    contexts, labels = random_batch(rng, 50, 7)
    assert batch_softmax(small_table, contexts, labels).value == pytest.approx(
        brute_batch_softmax(small_table, contexts, labels), rel=1e-12)


def test_batch_softmax_rejects_single(small_table):
    with pytest.raises(ConfigError):
        batch_softmax(small_table, np.ones((1, 10), int), np.array([3]))


def test_batch_softmax_duplicates_not_masked(small_table):
    contexts = np.ones((2, 10), int)
    out = batch_softmax(small_table, contexts, np.array([4, 4]))
    assert out.value == pytest.approx(np.log(2), abs=1e-12)


def test_batch_softmax_depends_on_batching(small_table, rng):
    contexts, labels = random_batch(rng, 50, 16)
    whole = batch_softmax(small_table, contexts, labels).value
    halves = np.mean([batch_softmax(small_table, contexts[s], labels[s]).value
                      for s in (slice(0, 8), slice(8, 16))])
    assert abs(whole - halves) > 1e-3


# hinge

def test_hinge_satisfied_margin_is_zero():
    table = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 0.0]])
    out = hinge(table, np.array([[0, 1]]), np.array([2]))
    assert out.value == 0 and np.all(out.grad == 0)


def test_hinge_orthogonal_is_081():
    table = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    assert hinge(table, np.array([[0, 1]]), np.array([2])).value == pytest.approx(0.81, abs=1e-15)


# spreadout

def test_spreadout_antipodal():
    table = np.array([[9.0, 9.0], [1.0, 0.0], [-2.0, 0.0]])
    assert spreadout(table).value == pytest.approx(-4.0, abs=1e-15)


def test_spreadout_orthonormal():
    table = np.vstack([np.zeros(6), 3 * np.eye(6)])
    assert spreadout(table).value == pytest.approx(-2.0, abs=1e-14)


@pytest.mark.parametrize("distance", ["euclidean", "neg_dot"])
@pytest.mark.parametrize("vocab", [3, 6, 65])
@pytest.mark.parametrize("include_pad", [False, True])
def test_spreadout_gram_matches_double_loop(distance, vocab, include_pad):
    table = init_params(ModelConfig(vocab, 8), vocab)
    got = spreadout(table, distance, include_pad).value
    assert got == pytest.approx(brute_spreadout(table, distance, include_pad), rel=0, abs=1e-10)


def test_spreadout_pad_row_gradient_zero_by_default(small_table):
    assert np.all(spreadout(small_table).grad[0] == 0)
    assert np.any(spreadout(small_table, include_pad=True).grad[0] != 0)


def test_spreadout_needs_two_rows():
    with pytest.raises(ConfigError):
        spreadout(np.ones((2, 3)))


# global softmax

def test_global_softmax_two_equal_candidates_is_ln2():
    # context is the mean of both candidates, so both logits equal 1/sqrt(2)
    table = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    out = global_softmax(table, np.array([[1, 2]]), np.array([1]))
    assert out.value == pytest.approx(np.log(2), abs=1e-15)


def test_global_softmax_matches_loop(small_table, rng):
    contexts, labels = random_batch(rng, 50, 5)
    assert global_softmax(small_table, contexts, labels).value == pytest.approx(
        brute_global_softmax(small_table, contexts, labels), rel=1e-12)


# compose and gradients

@pytest.mark.parametrize("kind", KINDS)
def test_every_kind_passes_grad_check(kind, rng):
    table = init_params(ModelConfig(50, 8), 11)
    config = LossConfig(kind=kind)
    contexts, labels = away_from_kink(table, rng)
    out = compose(table, contexts, labels, config)
    err = grad_check(lambda t: compose(t, contexts, labels, config).value, out.grad, table, step=1e-5)
    assert err <= 1e-4


@pytest.mark.parametrize("distance", ["euclidean", "neg_dot"])
def test_spreadout_grad_check(distance):
    table = init_params(ModelConfig(6, 4), 5)
    out = spreadout(table, distance)
    assert grad_check(lambda t: spreadout(t, distance).value, out.grad, table) <= 1e-4


def test_alpha_zero_degenerates(small_table, rng):
    contexts, labels = random_batch(rng, 50, 8)
    bs = compose(small_table, contexts, labels, LossConfig(kind="BS"))
    bs_s = compose(small_table, contexts, labels, LossConfig(kind="BS_S", alpha=0.0))
    h_s = compose(small_table, contexts, labels, LossConfig(kind="H_S", alpha=0.0))
    h = hinge(small_table, contexts, labels)
    assert bs_s.value == bs.value and np.array_equal(bs_s.grad, bs.grad)
    assert h_s.value == h.value and np.array_equal(h_s.grad, h.grad)


@pytest.mark.parametrize("alpha", [0.1, 2.5])
def test_compose_is_linear(small_table, rng, alpha):
    contexts, labels = random_batch(rng, 50, 8)
    h_s = compose(small_table, contexts, labels, LossConfig(kind="H_S", alpha=alpha))
    h, s = hinge(small_table, contexts, labels), spreadout(small_table)
    assert h_s.value == pytest.approx(h.value + alpha * s.value, rel=1e-12)
    np.testing.assert_allclose(h_s.grad, h.grad + alpha * s.grad, rtol=1e-12, atol=1e-15)


@pytest.mark.parametrize("kind", ["BS", "H_S", "GS"])
def test_pad_row_gets_no_gradient(small_table, rng, kind):
    contexts, labels = random_batch(rng, 50, 8)
    assert np.all(compose(small_table, contexts, labels, LossConfig(kind=kind)).grad[0] == 0)


@pytest.mark.parametrize("kwargs", [{"kind": "XX"}, {"margin": 0.0}, {"margin": 1.5},
                                    {"alpha": -1.0}, {"distance": "cosine"}])
def test_loss_config_validation(kwargs):
    with pytest.raises(ConfigError):
        LossConfig(**kwargs)


# batch-insensitivity certifier

PARTITIONS = [even_partition(16, m) for m in (1, 2, 4, 16)]


@pytest.mark.parametrize("kind,expected", [("H_S", True), ("GS", True), ("BS", False), ("BS_S", False)])
def test_certifier_verdicts(small_table, rng, kind, expected):
    contexts, labels = random_batch(rng, 50, 16)
    report = certify_batch_insensitive(small_table, contexts, labels, PARTITIONS, LossConfig(kind=kind))
    assert report.insensitive is expected
    if expected:
        assert report.value_spread <= 1e-9 and report.grad_spread <= 1e-9
    else:
        assert report.value_spread > 1e-3


def test_certifier_random_partition_insensitive(small_table, rng):
    contexts, labels = random_batch(rng, 50, 16)
    perm = rng.permutation(16)
    shuffled = [perm[:3], perm[3:11], perm[11:]]
    report = certify_batch_insensitive(small_table, contexts, labels, [PARTITIONS[0], shuffled],
                                       LossConfig(kind="GS"))
    assert report.insensitive


def test_certifier_rejects_mismatched_partition(small_table, rng):
    contexts, labels = random_batch(rng, 50, 16)
    with pytest.raises(ConfigError):
        certify_batch_insensitive(small_table, contexts, labels, [[np.arange(15)]], LossConfig(kind="GS"))
