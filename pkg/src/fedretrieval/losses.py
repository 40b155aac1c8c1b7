"""Training objectives for the dual encoder, each with an analytic gradient.

Every loss takes the embedding table plus a batch given as ``contexts``
``(B, W)`` and ``labels`` ``(B,)`` and returns a :class:`LossOutput` whose
gradient has the shape of the table.

Kinds:

* ``BS``   softmax over in-batch items (batch-sensitive)
* ``BS_S`` ``BS`` plus ``alpha * spreadout``
* ``H_S``  squared hinge on the positive pair plus ``alpha * spreadout``
* ``GS``   softmax over the whole item vocabulary
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .model import context_backward, encode_context, encode_item, item_backward, normalized_items
from .numerics import DEFAULT_EPS, l2_normalize, l2_normalize_vjp, log_softmax

KINDS = ("BS", "BS_S", "H_S", "GS")
DISTANCES = ("euclidean", "neg_dot")


@dataclass
class LossConfig:
    kind: str = "BS"
    margin: float = 0.9
    alpha: float = 0.1
    distance: str = "euclidean"
    spreadout_include_pad: bool = False
    norm_eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if not 0 < self.margin <= 1:
            raise ConfigError(f"margin must be in (0, 1], got {self.margin}")
        if self.alpha < 0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.distance not in DISTANCES:
            raise ConfigError(f"unknown spreadout distance {self.distance!r}")

    @property
    def uses_batch_negatives(self):
        return self.kind in ("BS", "BS_S")

    @property
    def min_batch_size(self):
        return 2 if self.uses_batch_negatives else 1


@dataclass
class LossOutput:
    value: float
    grad: np.ndarray

    def __add__(self, other):
        return LossOutput(self.value + other.value, self.grad + other.grad)

    def scaled(self, weight):
        return LossOutput(weight * self.value, weight * self.grad)


def _towers(table, contexts, labels, eps):
    f, cache = encode_context(table, np.atleast_2d(contexts), eps)
    labels = np.atleast_1d(np.asarray(labels))
    g = encode_item(table, labels, eps)
    return f, cache, labels, g


def _backward(table, cache, labels, grad_f, grad_g, eps):
    grad = np.zeros_like(table)
    context_backward(cache, grad_f, grad, eps)
    item_backward(table, labels, grad_g, grad, eps)
    return grad


def batch_softmax(table, contexts, labels, eps=DEFAULT_EPS, allow_single=False):
    """Cross-entropy over the in-batch similarity matrix.

    Row ``i`` of the logits scores context ``i`` against every label in the
    batch; the diagonal holds the positives. Duplicate labels are not masked.
    A batch of one has no negatives and is rejected unless ``allow_single``,
    in which case the loss is identically zero.
    """
    f, cache, labels, g = _towers(table, contexts, labels, eps)
    b = len(labels)
    if b < 2 and not allow_single:
        raise ConfigError("batch softmax needs at least 2 examples per batch")
    logits = f @ g.T
    logp = log_softmax(logits, axis=1)
    value = -np.mean(np.diag(logp))
    d_logits = np.exp(logp)
    d_logits[np.diag_indices(b)] -= 1.0
    d_logits /= b
    grad = _backward(table, cache, labels, d_logits @ g, d_logits.T @ f, eps)
    return LossOutput(float(value), grad)


def hinge(table, contexts, labels, margin=0.9, eps=DEFAULT_EPS):
    """Mean of ``max(0, margin - <f(x), g(y)>)^2`` over the batch."""
    f, cache, labels, g = _towers(table, contexts, labels, eps)
    b = len(labels)
    slack = np.maximum(0.0, margin - np.sum(f * g, axis=1))
    value = np.mean(slack**2)
    d_s = (-2.0 * slack / b)[:, None]
    grad = _backward(table, cache, labels, d_s * g, d_s * f, eps)
    return LossOutput(float(value), grad)


def _spreadout_rows(table, include_pad):
    return np.arange(0 if include_pad else 1, table.shape[0])


def spreadout(table, distance="euclidean", include_pad=False, eps=DEFAULT_EPS):
    """Mean pairwise spreadout penalty over the L2-normalised table rows.

    ``euclidean``: each ordered pair contributes ``-||w_v - w_u||^2``.
    ``neg_dot``:   each ordered pair contributes ``<w_v, w_u>^2``.

    Both are evaluated through Gram identities in ``O(V * dim^2)`` rather
    than by enumerating pairs.
    """
    rows = _spreadout_rows(table, include_pad)
    n = len(rows)
    if n < 2:
        raise ConfigError("spreadout needs at least 2 rows")
    raw = table[rows]
    w = l2_normalize(raw, eps)
    sq = np.sum(w * w, axis=1)
    pairs = n * (n - 1)
    if distance == "euclidean":
        # sum_{v != u} -||a - b||^2 = 2(||sum a||^2 - sum|a|^2) - 2(n-1) sum|a|^2
        total_vec = w.sum(axis=0)
        total = 2.0 * (total_vec @ total_vec - sq.sum()) - 2.0 * (n - 1) * sq.sum()
        d_w = 4.0 * total_vec[None, :] - 4.0 * n * w
    elif distance == "neg_dot":
        gram = w.T @ w
        total = np.sum(gram * gram) - np.sum(sq**2)
        d_w = 4.0 * (w @ gram) - 4.0 * sq[:, None] * w
    else:
        raise ConfigError(f"unknown spreadout distance {distance!r}")
    grad = np.zeros_like(table)
    grad[rows] = l2_normalize_vjp(raw, d_w / pairs, eps)
    return LossOutput(float(total / pairs), grad)


def global_softmax(table, contexts, labels, eps=DEFAULT_EPS):
    """Cross-entropy of each label against every item in the vocabulary."""
    f, cache = encode_context(table, np.atleast_2d(contexts), eps)
    labels = np.atleast_1d(np.asarray(labels))
    encode_item(table, labels, eps)  # range check
    b = len(labels)
    items = normalized_items(table, eps)
    logp = log_softmax(f @ items.T, axis=1)
    cols = labels - 1
    value = -np.mean(logp[np.arange(b), cols])
    d_logits = np.exp(logp)
    d_logits[np.arange(b), cols] -= 1.0
    d_logits /= b
    grad = np.zeros_like(table)
    context_backward(cache, d_logits @ items, grad, eps)
    grad[1:] += l2_normalize_vjp(table[1:], d_logits.T @ f, eps)
    return LossOutput(float(value), grad)


def compose(table, contexts, labels, config):
    """Evaluate the loss selected by ``config.kind``."""
    eps = config.norm_eps
    if config.kind == "GS":
        return global_softmax(table, contexts, labels, eps)
    if config.kind in ("BS", "BS_S"):
        out = batch_softmax(table, contexts, labels, eps)
    else:
        out = hinge(table, contexts, labels, config.margin, eps)
    if config.kind == "BS":
        return out
    reg = spreadout(table, config.distance, config.spreadout_include_pad, eps)
    return out + reg.scaled(config.alpha)


@dataclass
class CertificationReport:
    values: list
    value_spread: float
    grad_spread: float
    insensitive: bool


def _check_partition(partition, n):
    flat = np.concatenate([np.asarray(batch, dtype=np.int64) for batch in partition])
    if len(flat) != n or not np.array_equal(np.sort(flat), np.arange(n)):
        raise ConfigError("each partition must cover every example exactly once")


def even_partition(n, num_batches):
    """Split ``range(n)`` into ``num_batches`` contiguous index blocks."""
    return np.array_split(np.arange(n), num_batches)


def certify_batch_insensitive(table, contexts, labels, partitions, config, tol=1e-9):
    """Check whether a loss is invariant to how a fixed example set is batched.

    Each partition is a list of index arrays into ``contexts``/``labels``.
    Every batch is evaluated at the same ``table`` and the results combined as
    an example-count-weighted mean, as if the batches ran in parallel.
    """
    contexts = np.atleast_2d(contexts)
    labels = np.asarray(labels)
    n = len(labels)
    values, grads = [], []
    for partition in partitions:
        _check_partition(partition, n)
        value, grad = 0.0, np.zeros_like(table)
        for batch in partition:
            batch = np.asarray(batch, dtype=np.int64)
            if config.uses_batch_negatives and len(batch) < 2:
                out = batch_softmax(table, contexts[batch], labels[batch], config.norm_eps, allow_single=True)
                if config.kind == "BS_S":
                    out = out + spreadout(
                        table, config.distance, config.spreadout_include_pad, config.norm_eps
                    ).scaled(config.alpha)
            else:
                out = compose(table, contexts[batch], labels[batch], config)
            weight = len(batch) / n
            value += weight * out.value
            grad += weight * out.grad
        values.append(value)
        grads.append(grad)

    values_arr = np.array(values)
    scale = max(np.max(np.abs(values_arr)), 1e-300)
    value_spread = float((values_arr.max() - values_arr.min()) / scale)
    ref = grads[0]
    grad_scale = max(np.max(np.abs(ref)), 1e-300)
    grad_spread = float(max(np.max(np.abs(g - ref)) for g in grads) / grad_scale)
    return CertificationReport(values, value_spread, grad_spread, value_spread <= tol and grad_spread <= tol)
