"""ID-based dual encoder sharing one embedding table between both towers.

The context tower averages the embeddings of the non-pad ids in a context
window and L2-normalizes the result. The item tower looks up the item's row
and L2-normalizes it. Scores are dot products of the two unit vectors.

Parameters are a plain ``(vocab, dim)`` float64 array; row 0 is the pad row.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ParseError, RangeError
from .numerics import DEFAULT_EPS, l2_normalize, l2_normalize_vjp

PAD_ID = 0
CHECKPOINT_MAGIC = b"FDRM"


@dataclass
class ModelConfig:
    vocab: int = 3953
    dim: int = 16
    norm_eps: float = DEFAULT_EPS

    def __post_init__(self):
        if self.vocab < 2:
            raise ConfigError(f"vocab must be >= 2, got {self.vocab}")
        if self.dim < 1:
            raise ConfigError(f"dim must be >= 1, got {self.dim}")


def init_params(config, seed, scale=0.1):
    """Uniform(-scale, scale) initialisation of the shared table."""
    if scale <= 0:
        raise ConfigError("scale must be positive")
    rng = np.random.default_rng(seed)
    return rng.uniform(-scale, scale, size=(config.vocab, config.dim))


@dataclass
class ContextCache:
    """Forward state of the context tower needed for backprop."""

    contexts: np.ndarray  # (B, W) ids
    mask: np.ndarray  # (B, W) bool, True for non-pad
    counts: np.ndarray  # (B,) non-pad count
    mean: np.ndarray  # (B, dim) pre-normalisation average
    f: np.ndarray  # (B, dim) unit context embeddings


def encode_context(table, contexts, eps=DEFAULT_EPS):
    """Encode a batch of context windows.

    ``contexts`` may be a single window ``(W,)`` or a batch ``(B, W)``; the
    embedding has the matching leading shape. Returns ``(f, cache)``.
    """
    contexts = np.asarray(contexts)
    single = contexts.ndim == 1
    ctx = np.atleast_2d(contexts)
    mask = ctx != PAD_ID
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ConfigError("context window contains only pad ids")
    rows = table[ctx] * mask[..., None]
    mean = rows.sum(axis=1) / counts[:, None]
    f = l2_normalize(mean, eps)
    cache = ContextCache(ctx, mask, counts, mean, f)
    return (f[0] if single else f), cache


def context_backward(cache, grad_f, grad_table, eps=DEFAULT_EPS):
    """Accumulate d(loss)/d(table) from d(loss)/d(f) into ``grad_table``."""
    grad_mean = l2_normalize_vjp(cache.mean, np.atleast_2d(grad_f), eps)
    per_slot = (grad_mean / cache.counts[:, None])[:, None, :] * cache.mask[..., None]
    np.add.at(grad_table, cache.contexts.ravel(), per_slot.reshape(-1, grad_table.shape[1]))


def _check_item_ids(ids, vocab):
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 1 or ids.max() >= vocab):
        bad = ids[(ids < 1) | (ids >= vocab)].ravel()[0]
        raise RangeError(f"item id {int(bad)} outside [1, {vocab})")
    return ids


def encode_item(table, ids, eps=DEFAULT_EPS):
    """Unit item embeddings for one id or an array of ids."""
    ids = _check_item_ids(ids, table.shape[0])
    return l2_normalize(table[ids], eps)


def item_backward(table, ids, grad_g, grad_table, eps=DEFAULT_EPS):
    ids = np.atleast_1d(np.asarray(ids))
    grad_rows = l2_normalize_vjp(table[ids], np.atleast_2d(grad_g), eps)
    np.add.at(grad_table, ids, grad_rows)


def similarity(f, g):
    return np.sum(np.asarray(f) * np.asarray(g), axis=-1)


def normalized_items(table, eps=DEFAULT_EPS):
    """Unit embeddings of every real item, rows 1..vocab-1."""
    return l2_normalize(table[1:], eps)


def score_all_items(table, f, eps=DEFAULT_EPS, items=None):
    """Scores of one or more context embeddings against the whole vocabulary.

    Column ``v`` holds the score of movie ``v``; column 0 (pad) is ``-inf``.
    ``items`` may pass precomputed :func:`normalized_items` output.
    """
    if items is None:
        items = normalized_items(table, eps)
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    f2 = np.atleast_2d(f)
    scores = np.empty((f2.shape[0], table.shape[0]))
    scores[:, 0] = -np.inf
    scores[:, 1:] = f2 @ items.T
    return scores[0] if single else scores


def save_checkpoint(path, table):
    """Write ``FDRM`` header (magic, vocab, dim as LE uint32) then LE float64 rows."""
    table = np.ascontiguousarray(table, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", table.shape[0], table.shape[1]))
        fh.write(table.tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
        vocab, dim = struct.unpack("<II", fh.read(8))
        data = fh.read()
    if len(data) != vocab * dim * 8:
        raise ParseError(f"{path}: expected {vocab * dim} floats, found {len(data) // 8}")
    return np.frombuffer(data, dtype="<f8").reshape(vocab, dim).astype(np.float64)
