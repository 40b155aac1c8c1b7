"""MovieLens 1M ingestion, next-movie windowing and client partitioning.

Example sets are stored column-wise in numpy arrays (context windows,
labels, owning user) so the full dataset of ~1M examples stays compact.
"""

import os
import struct
from collections import defaultdict
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ParseError, RangeError

WINDOW = 10
MAX_MOVIE_ID = 3952
ML1M_VOCAB = MAX_MOVIE_ID + 1
ML1M_RATINGS = 1_000_209
ML1M_USERS = 6040
ML1M_USER_SPLIT = (4832, 603, 605)
CACHE_MAGIC = b"FDR1"

CENTRALIZED = "centralized"
FEDERATED = "federated"
FEDERATED_SHUFFLED = "federated_shuffled"
SPLIT_MODES = (CENTRALIZED, FEDERATED, FEDERATED_SHUFFLED)


class Rating(NamedTuple):
    user_id: int
    movie_id: int
    rating: int
    timestamp: int


@dataclass
class ExampleSet:
    contexts: np.ndarray  # (N, W) int64, 0 = pad
    labels: np.ndarray  # (N,) int64
    users: np.ndarray  # (N,) int64

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        return ExampleSet(self.contexts[idx], self.labels[idx], self.users[idx])

    @classmethod
    def empty(cls, window=WINDOW):
        return cls(np.zeros((0, window), np.int64), np.zeros(0, np.int64), np.zeros(0, np.int64))

    @classmethod
    def concat(cls, sets):
        sets = list(sets)
        if not sets:
            return cls.empty()
        return cls(
            np.concatenate([s.contexts for s in sets]),
            np.concatenate([s.labels for s in sets]),
            np.concatenate([s.users for s in sets]),
        )


@dataclass
class ClientDataset:
    user_id: int
    examples: ExampleSet

    def __len__(self):
        return len(self.examples)


@dataclass
class DatasetSplits:
    """Train/val/test payloads: ExampleSets for centralized, client lists otherwise."""

    mode: str
    train: object
    val: object
    test: object


def parse_ratings(source, max_movie_id=MAX_MOVIE_ID):
    """Parse ``UserID::MovieID::Rating::Timestamp`` lines.

    ``source`` may be a path, a binary stream or a text stream. Only numeric
    fields are read, so the encoding of the file does not matter.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return parse_ratings(fh, max_movie_id)
    ratings = []
    for line_number, line in enumerate(source, start=1):
        if isinstance(line, bytes):
            line = line.decode("latin-1")
        line = line.strip()
        if not line:
            continue
        parts = line.split("::")
        if len(parts) != 4:
            raise ParseError(f"expected 4 '::'-separated fields, got {len(parts)}", line_number)
        try:
            user, movie, rating, ts = (int(p) for p in parts)
        except ValueError:
            raise ParseError(f"non-integer field in {line!r}", line_number) from None
        if not 1 <= movie <= max_movie_id:
            raise RangeError(f"line {line_number}: movie id {movie} outside [1, {max_movie_id}]")
        if user < 1:
            raise ParseError(f"user id {user} must be positive", line_number)
        ratings.append(Rating(user, movie, rating, ts))
    return ratings


def build_examples(ratings, window=WINDOW):
    """Windowed next-movie examples for one user's ratings.

    Ratings are ordered by (timestamp, movie_id). The ``t``-th example predicts
    the movie at position ``t`` from up to ``window`` preceding movies,
    left-padded with 0, so ``n`` ratings yield ``n - 1`` examples.
    """
    ratings = list(ratings)
    if len({r.user_id for r in ratings}) > 1:
        raise ConfigError("build_examples expects ratings of a single user")
    user = ratings[0].user_id if ratings else 0
    movies = [r.movie_id for r in sorted(ratings, key=lambda r: (r.timestamp, r.movie_id))]
    return _window(np.asarray(movies, dtype=np.int64), user, window)


def _window(movies, user, window):
    n = len(movies)
    if n < 2:
        return ExampleSet.empty(window)
    padded = np.concatenate([np.zeros(window, np.int64), movies])
    # row t-1 holds the `window` movies before position t
    idx = np.arange(1, n)[:, None] + np.arange(window)[None, :]
    contexts = padded[idx]
    return ExampleSet(contexts, movies[1:].copy(), np.full(n - 1, user, np.int64))


def build_clients(ratings, window=WINDOW):
    """Group ratings by user and window each user; clients sorted by user id."""
    by_user = defaultdict(list)
    for r in ratings:
        by_user[r.user_id].append(r)
    clients = []
    for user in sorted(by_user):
        examples = build_examples(by_user[user], window)
        if len(examples):
            clients.append(ClientDataset(user, examples))
    return clients


def pool(clients):
    return ExampleSet.concat(c.examples for c in clients)


def split_centralized(examples, train_fraction=0.9, seed=0, val_fraction=0.0):
    """Shuffle all examples and cut a train prefix; the rest is test.

    With ``val_fraction > 0`` that fraction of the train part is carved off
    as a validation set.
    """
    if not 0 < train_fraction < 1:
        raise ConfigError(f"train_fraction must be in (0, 1), got {train_fraction}")
    if not 0 <= val_fraction < 1:
        raise ConfigError(f"val_fraction must be in [0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(examples))
    n_train = int(round(len(examples) * train_fraction))
    n_val = int(round(n_train * val_fraction))
    train_idx, test_idx = perm[:n_train], perm[n_train:]
    val_idx, train_idx = train_idx[:n_val], train_idx[n_val:]
    return DatasetSplits(
        CENTRALIZED, examples.subset(train_idx), examples.subset(val_idx), examples.subset(test_idx)
    )


def federated_split_sizes(num_users):
    if num_users < 3:
        raise ConfigError(f"need at least 3 users for a train/val/test split, got {num_users}")
    if num_users == ML1M_USERS:
        return ML1M_USER_SPLIT
    n_val = max(1, int(round(0.1 * num_users)))
    n_train = min(int(round(0.8 * num_users)), num_users - 2 * n_val)
    n_train = max(1, n_train)
    return n_train, n_val, num_users - n_train - n_val


def split_federated(clients, seed=0):
    """Assign whole users to train/val/test (4832/603/605 on ML-1M, else 80/10/10)."""
    clients = sorted(clients, key=lambda c: c.user_id)
    n_train, n_val, _ = federated_split_sizes(len(clients))
    order = np.random.default_rng(seed).permutation(len(clients))
    shuffled = [clients[i] for i in order]

    def by_id(group):
        return sorted(group, key=lambda c: c.user_id)

    return DatasetSplits(
        FEDERATED,
        by_id(shuffled[:n_train]),
        by_id(shuffled[n_train : n_train + n_val]),
        by_id(shuffled[n_train + n_val :]),
    )


def shuffle_across_clients(clients, seed=0):
    """Redistribute all examples uniformly at random, keeping per-client counts."""
    if not clients:
        raise ConfigError("no clients to shuffle")
    pooled = pool(clients)
    perm = np.random.default_rng(seed).permutation(len(pooled))
    out, start = [], 0
    for client in clients:
        idx = perm[start : start + len(client)]
        start += len(client)
        out.append(ClientDataset(client.user_id, pooled.subset(idx)))
    return out


def make_splits(clients, mode, seed=0, train_fraction=0.9, central_val_fraction=0.0):
    """Build the splits for one regime from per-user client datasets."""
    if mode == CENTRALIZED:
        return split_centralized(pool(clients), train_fraction, seed, central_val_fraction)
    if mode not in SPLIT_MODES:
        raise ConfigError(f"unknown split mode {mode!r}")
    splits = split_federated(clients, seed)
    if mode == FEDERATED_SHUFFLED:
        splits.train = shuffle_across_clients(splits.train, seed)
        splits.mode = FEDERATED_SHUFFLED
    return splits


def synth_dataset(num_users, vocab, skew, seed, window=WINDOW, min_len=20, mean_extra_len=20, topic_size=1):
    """Synthetic per-user watch sequences with tunable heterogeneity.

    Movies ``1..vocab-1`` sit on a ring. Each user gets a random centre on the
    ring and ranks movies by ring distance from it (random tie order); the
    user's preference is Zipf over that ranking, ``p(r) ~ (r + 1) ** -skew``,
    so ``skew = 0`` makes every user uniform over the vocabulary. Sequences are
    drawn from this preference, excluding the previous ``window`` movies so a
    label never repeats an item in its own context.

    Returns one :class:`ClientDataset` per user, ids ``1..num_users``.
    """
    if vocab < 2 or num_users < 1 or skew < 0:
        raise ConfigError("synth_dataset needs vocab >= 2, num_users >= 1, skew >= 0")
    rng = np.random.default_rng(seed)
    num_movies = vocab - 1
    movies = np.arange(1, vocab)
    positions = np.arange(num_movies)
    zipf = (np.arange(num_movies) + 1.0) ** -skew
    exclude = min(window, num_movies - 1)
    clients = []
    for user in range(1, num_users + 1):
        centre = rng.uniform(0, num_movies)
        dist = np.abs(positions // topic_size - centre // topic_size)
        dist = np.minimum(dist, -(-num_movies // topic_size) - dist)
        ranking = np.lexsort((rng.random(num_movies), dist))
        pref = np.empty(num_movies)
        pref[ranking] = zipf
        length = min_len + rng.poisson(mean_extra_len)
        seq = []
        for _ in range(length):
            p = pref.copy()
            if exclude and seq:
                p[np.asarray(seq[-exclude:]) - 1] = 0.0
            seq.append(int(rng.choice(movies, p=p / p.sum())))
        examples = _window(np.asarray(seq, np.int64), user, window)
        clients.append(ClientDataset(user, examples))
    return clients


def write_examples_cache(path, examples, vocab):
    """Write examples as ``FDR1`` records of little-endian uint32.

    Header: magic, vocab, record count. Record: 10 context ids, label, user id.
    """
    if examples.contexts.shape[1] != WINDOW:
        raise ConfigError(f"cache format stores windows of {WINDOW}")
    records = np.column_stack([examples.contexts, examples.labels, examples.users]).astype("<u4")
    with open(path, "wb") as fh:
        fh.write(CACHE_MAGIC)
        fh.write(struct.pack("<II", vocab, len(examples)))
        fh.write(records.tobytes())


def read_examples_cache(path):
    """Inverse of :func:`write_examples_cache`; returns ``(examples, vocab)``."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CACHE_MAGIC:
            raise ParseError(f"{path}: bad cache magic {magic!r}")
        vocab, count = struct.unpack("<II", fh.read(8))
        data = fh.read()
    width = WINDOW + 2
    if len(data) != count * width * 4:
        raise ParseError(f"{path}: truncated cache, expected {count} records")
    records = np.frombuffer(data, dtype="<u4").reshape(count, width).astype(np.int64)
    return ExampleSet(records[:, :WINDOW].copy(), records[:, WINDOW].copy(), records[:, WINDOW + 1].copy()), vocab


def clients_from_examples(examples):
    """Regroup a pooled example set into per-user clients, preserving order."""
    order = np.argsort(examples.users, kind="stable")
    users, starts = np.unique(examples.users[order], return_index=True)
    bounds = list(starts[1:]) + [len(order)]
    return [
        ClientDataset(int(u), examples.subset(order[s:e])) for u, s, e in zip(users, starts, bounds)
    ]
