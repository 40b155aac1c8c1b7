"""Recall@k over the full vocabulary (global) or within a batch, and the
relative centralized/federated performance drop."""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import encode_context, encode_item, normalized_items
from .numerics import DEFAULT_EPS

DEFAULT_KS = (1, 5, 10)
GLOBAL = "global"
BATCH = "batch"


@dataclass(frozen=True)
class RecallReport:
    ks: tuple
    recalls: tuple  # percentages, aligned with ks
    mode: str
    num_examples: int

    def __post_init__(self):
        r = np.asarray(self.recalls, dtype=float)
        if np.any(r < 0) or np.any(r > 100):
            raise AssertionError(f"recall outside [0, 100]: {self.recalls}")
        if np.any(np.diff(r) < 0):
            raise AssertionError(f"recall not monotone in k: {self.recalls}")

    def at(self, k):
        return self.recalls[self.ks.index(k)]

    def as_dict(self):
        return {f"recall_at_{k}": r for k, r in zip(self.ks, self.recalls)}


def _check_ks(ks):
    ks = tuple(int(k) for k in ks)
    if not ks or any(k < 1 for k in ks) or list(ks) != sorted(ks):
        raise ConfigError(f"ks must be positive and ascending, got {ks}")
    return ks


def _report(ranks, ks, mode):
    ranks = np.asarray(ranks)
    recalls = tuple(float(100.0 * np.mean(ranks <= k)) for k in ks)
    return RecallReport(ks, recalls, mode, len(ranks))


def global_ranks(table, contexts, labels, eps=DEFAULT_EPS, chunk=2048):
    """1-based rank of each label among all items; ties go to the lower id."""
    contexts = np.atleast_2d(contexts)
    labels = np.asarray(labels)
    items = normalized_items(table, eps)
    item_ids = np.arange(1, table.shape[0])
    ranks = np.empty(len(labels), dtype=np.int64)
    for start in range(0, len(labels), chunk):
        stop = start + chunk
        f, _ = encode_context(table, contexts[start:stop], eps)
        y = labels[start:stop]
        scores = f @ items.T
        target = scores[np.arange(len(y)), y - 1][:, None]
        ahead = (scores > target) | ((scores == target) & (item_ids[None, :] < y[:, None]))
        ranks[start:stop] = 1 + ahead.sum(axis=1)
    return ranks


def global_recall(table, contexts, labels, ks=DEFAULT_KS, eps=DEFAULT_EPS):
    """Percentage of examples whose label ranks in the top k of the whole vocabulary."""
    ks = _check_ks(ks)
    if len(labels) == 0:
        raise ConfigError("global recall of an empty example set is undefined")
    return _report(global_ranks(table, contexts, labels, eps), ks, GLOBAL)


def batch_ranks(table, contexts, labels, eps=DEFAULT_EPS):
    """Rank of each label among the batch's own labels, same tie rule as global."""
    f, _ = encode_context(table, np.atleast_2d(contexts), eps)
    labels = np.asarray(labels)
    g = encode_item(table, labels, eps)
    scores = f @ g.T
    target = np.diag(scores)[:, None]
    ahead = (scores > target) | ((scores == target) & (labels[None, :] < labels[:, None]))
    return 1 + ahead.sum(axis=1)


def batch_recall(table, batches, ks=DEFAULT_KS, eps=DEFAULT_EPS):
    """Recall@k where each example competes only with its batch's labels.

    ``batches`` is an iterable of ``(contexts, labels)`` pairs. In a batch of
    ``B < k`` every example trivially lands in the top k.
    """
    ks = _check_ks(ks)
    ranks = [batch_ranks(table, c, y, eps) for c, y in batches]
    if not ranks:
        raise ConfigError("batch recall of an empty input is undefined")
    return _report(np.concatenate(ranks), ks, BATCH)


def fixed_batches(examples, batch_size, seed=0):
    """Seeded shuffle of an ExampleSet cut into consecutive batches."""
    perm = np.random.default_rng(seed).permutation(len(examples))
    for start in range(0, len(perm), batch_size):
        idx = perm[start : start + batch_size]
        yield examples.contexts[idx], examples.labels[idx]


def performance_drop(central, federated):
    """Relative gap ``(R_c - R_f) / R_c`` in percent."""
    if central == 0:
        raise ConfigError("performance drop undefined for zero centralized recall")
    return 100.0 * (central - federated) / central


def mean_pairwise_cosine(table, eps=DEFAULT_EPS):
    """Mean cosine similarity over ordered pairs of distinct item rows (pad excluded).

    Values near 1 mean the item embeddings have collapsed to one direction.
    """
    w = normalized_items(table, eps)
    n = len(w)
    if n < 2:
        raise ConfigError("need at least 2 items")
    total = w.sum(axis=0)
    return float((total @ total - np.sum(w * w)) / (n * (n - 1)))
