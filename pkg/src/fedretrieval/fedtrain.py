"""Centralized SGD, FedSGD and FedAvg training of the shared embedding table.

Randomness is derived from ``(seed, round, client id)`` rather than from a
running generator, so results do not depend on thread scheduling and a run
resumed from a checkpoint at round ``r`` continues exactly as the original.
"""

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .data import ClientDataset, pool
from .errors import ConfigError, NonFiniteError
from .losses import compose
from .model import init_params

log = logging.getLogger(__name__)

ALGORITHMS = ("centralized", "fedsgd", "fedavg")
THREADS_ENV = "FEDRETRIEVAL_THREADS"

_SAMPLE_STREAM = 1
_CLIENT_STREAM = 2
_EPOCH_STREAM = 3
_INIT_STREAM = 4


@dataclass
class TrainConfig:
    algorithm: str = "fedavg"
    batch_size: int = 16
    clients_per_round: int = 100
    local_epochs: int = 1
    client_lr: float = 0.05
    server_lr: float = 1.0
    rounds: int = 100
    epochs: int = 10
    eval_every: int = 0  # 0 = every epoch (centralized) / every 10 rounds (federated)
    checkpoint_every: int = 0
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}; expected one of {ALGORITHMS}")
        if self.batch_size < 1 or self.clients_per_round < 1 or self.local_epochs < 1:
            raise ConfigError("batch_size, clients_per_round and local_epochs must be >= 1")
        if self.client_lr <= 0 or self.server_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.rounds < 0 or self.epochs < 0 or self.eval_every < 0:
            raise ConfigError("rounds, epochs and eval_every must be >= 0")


@dataclass
class ClientUpdate:
    client_id: int
    delta: np.ndarray
    num_examples: int
    loss: float


@dataclass
class RoundMetrics:
    round: int
    train_loss: float
    wall_ms: float = 0.0
    extra: dict = field(default_factory=dict)


def thread_count():
    """Worker threads from FEDRETRIEVAL_THREADS (0 or unset = one per CPU)."""
    raw = os.environ.get(THREADS_ENV, "0").strip() or "0"
    n = int(raw)
    if n < 0:
        raise ConfigError(f"{THREADS_ENV} must be >= 0")
    return n if n > 0 else (os.cpu_count() or 1)


def initial_table(model_cfg, train_cfg):
    return init_params(model_cfg, np.random.SeedSequence([train_cfg.seed, _INIT_STREAM]), train_cfg.init_scale)


def sgd_step(table, grad, lr, round_index=None):
    if lr <= 0:
        raise ConfigError("learning rate must be positive")
    if not np.all(np.isfinite(grad)):
        where = "" if round_index is None else f" at round {round_index}"
        raise NonFiniteError(f"non-finite gradient{where}")
    return table - lr * grad


def minibatches(n, batch_size, rng, min_batch=1):
    """Shuffled index batches; a final batch smaller than ``min_batch`` is dropped."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = perm[start : start + batch_size]
        if len(idx) >= min_batch:
            yield idx


def train_centralized(train, model_cfg, loss_cfg, train_cfg, on_eval=None, table=None, start_epoch=0,
                      on_checkpoint=None):
    """Sequential mini-batch SGD over a pooled :class:`ExampleSet`.

    ``on_eval(epoch, table, train_loss)`` is called every ``eval_every``
    epochs and after the last one. Returns ``(table, history)``.
    """
    if table is None:
        table = initial_table(model_cfg, train_cfg)
    table = np.array(table, dtype=np.float64, copy=True)
    history = []
    cadence = train_cfg.eval_every or 1
    for epoch in range(start_epoch + 1, train_cfg.epochs + 1):
        start = time.perf_counter()
        rng = np.random.default_rng([train_cfg.seed, _EPOCH_STREAM, epoch])
        loss_sum, seen = 0.0, 0
        for idx in minibatches(len(train), train_cfg.batch_size, rng, loss_cfg.min_batch_size):
            out = compose(table, train.contexts[idx], train.labels[idx], loss_cfg)
            table = sgd_step(table, out.grad, train_cfg.client_lr, epoch)
            loss_sum += out.value * len(idx)
            seen += len(idx)
        record = RoundMetrics(epoch, loss_sum / max(seen, 1), 1000.0 * (time.perf_counter() - start))
        history.append(record)
        log.debug("epoch %d loss %.6f", epoch, record.train_loss)
        if on_checkpoint and train_cfg.checkpoint_every and epoch % train_cfg.checkpoint_every == 0:
            on_checkpoint(epoch, table)
        if on_eval and (epoch % cadence == 0 or epoch == train_cfg.epochs):
            on_eval(epoch, table, record.train_loss)
    return table, history


def client_update_fedsgd(table, client, loss_cfg, lr):
    """One gradient step on the client's whole dataset as a single batch."""
    ex = client.examples
    out = compose(table, ex.contexts, ex.labels, loss_cfg)
    return ClientUpdate(client.user_id, -lr * out.grad, len(ex), out.value)


def client_update_fedavg(table, client, loss_cfg, train_cfg, rng):
    """``local_epochs`` passes of mini-batch SGD on a local copy of the table.

    Returns ``None`` if the client cannot form a single batch for the loss
    (a lone example under batch softmax).
    """
    ex = client.examples
    local = table.copy()
    loss_sum, seen = 0.0, 0
    for _ in range(train_cfg.local_epochs):
        for idx in minibatches(len(ex), train_cfg.batch_size, rng, loss_cfg.min_batch_size):
            out = compose(local, ex.contexts[idx], ex.labels[idx], loss_cfg)
            local -= train_cfg.client_lr * out.grad
            loss_sum += out.value * len(idx)
            seen += len(idx)
    if seen == 0:
        return None
    return ClientUpdate(client.user_id, local - table, len(ex), loss_sum / seen)


def aggregate(updates, server_lr=1.0):
    """Example-count-weighted mean of client deltas, scaled by ``server_lr``.

    Updates are reduced in client-id order so the result does not depend on
    the order in which they arrive.
    """
    updates = sorted(updates, key=lambda u: u.client_id)
    if not updates:
        raise ConfigError("cannot aggregate zero client updates")
    total = sum(u.num_examples for u in updates)
    acc = np.zeros_like(updates[0].delta)
    for u in updates:
        acc += u.num_examples * u.delta
    return server_lr * acc / total


def sample_clients(num_clients, per_round, seed, round_index):
    rng = np.random.default_rng([seed, _SAMPLE_STREAM, round_index])
    if per_round >= num_clients:
        return np.arange(num_clients)
    return np.sort(rng.choice(num_clients, size=per_round, replace=False))


def run_round(table, clients, loss_cfg, train_cfg, round_index, executor=None):
    """Sample clients, compute their updates and return ``(new_table, updates)``."""
    chosen = [clients[i] for i in sample_clients(len(clients), train_cfg.clients_per_round,
                                                 train_cfg.seed, round_index)]

    def work(client):
        if train_cfg.algorithm == "fedsgd":
            return client_update_fedsgd(table, client, loss_cfg, train_cfg.client_lr)
        rng = np.random.default_rng([train_cfg.seed, _CLIENT_STREAM, round_index, client.user_id])
        return client_update_fedavg(table, client, loss_cfg, train_cfg, rng)

    results = list(executor.map(work, chosen)) if executor else [work(c) for c in chosen]
    updates = [u for u in results if u is not None]
    if not updates:
        return table, updates
    new_table = table + aggregate(updates, train_cfg.server_lr)
    if not np.all(np.isfinite(new_table)):
        raise NonFiniteError(f"server parameters became non-finite at round {round_index}")
    return new_table, updates


def train_federated(clients, model_cfg, loss_cfg, train_cfg, on_eval=None, table=None, start_round=0,
                    on_checkpoint=None, threads=None):
    """FedSGD or FedAvg over a list of :class:`ClientDataset`.

    ``on_eval(round, table, train_loss)`` runs every ``eval_every`` rounds and
    after the last. Pass ``table`` and ``start_round`` to resume.
    """
    if train_cfg.algorithm not in ("fedsgd", "fedavg"):
        raise ConfigError(f"train_federated cannot run algorithm {train_cfg.algorithm!r}")
    if not clients:
        raise ConfigError("no training clients")
    if table is None:
        table = initial_table(model_cfg, train_cfg)
    table = np.array(table, dtype=np.float64, copy=True)
    threads = thread_count() if threads is None else threads
    executor = ThreadPoolExecutor(threads) if threads > 1 else None
    history = []
    cadence = train_cfg.eval_every or 10
    try:
        for r in range(start_round + 1, train_cfg.rounds + 1):
            start = time.perf_counter()
            table, updates = run_round(table, clients, loss_cfg, train_cfg, r, executor)
            n = sum(u.num_examples for u in updates)
            loss = sum(u.loss * u.num_examples for u in updates) / n if n else float("nan")
            record = RoundMetrics(r, loss, 1000.0 * (time.perf_counter() - start))
            history.append(record)
            if on_checkpoint and train_cfg.checkpoint_every and r % train_cfg.checkpoint_every == 0:
                on_checkpoint(r, table)
            if on_eval and (r % cadence == 0 or r == train_cfg.rounds):
                on_eval(r, table, loss)
    finally:
        if executor:
            executor.shutdown()
    return table, history


@dataclass
class Prop1Result:
    federated_delta: np.ndarray
    central_delta: np.ndarray
    max_rel_diff: float


def prop1_harness(clients, loss_cfg, table, lr):
    """Compare one FedSGD round with one SGD step on the pooled examples.

    Both paths start from ``table`` with learning rate ``lr``; the server
    learning rate is 1. For a batch-insensitive loss the two deltas agree to
    rounding error. The reported difference is the largest element-wise gap
    relative to the largest element of the pooled delta.
    """
    clients = [c if isinstance(c, ClientDataset) else ClientDataset(i, c) for i, c in enumerate(clients)]
    updates = [client_update_fedsgd(table, c, loss_cfg, lr) for c in clients]
    fed = aggregate(updates, server_lr=1.0)
    pooled = pool(clients)
    central = -lr * compose(table, pooled.contexts, pooled.labels, loss_cfg).grad
    scale = max(np.max(np.abs(central)), 1e-300)
    return Prop1Result(fed, central, float(np.max(np.abs(fed - central)) / scale))
