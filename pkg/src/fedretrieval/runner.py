"""Experiment orchestration: data -> split -> train -> evaluate -> artifacts.

A run directory holds ``config.txt`` (resolved configuration),
``metrics.csv`` and ``checkpoint.fdrm``; together they are enough to
re-verify or resume the run.
"""

import csv
import dataclasses
import json
import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import config as cfgmod
from .data import (
    CENTRALIZED,
    FEDERATED_SHUFFLED,
    CACHE_MAGIC,
    ML1M_VOCAB,
    ExampleSet,
    build_clients,
    clients_from_examples,
    make_splits,
    parse_ratings,
    pool,
    read_examples_cache,
    synth_dataset,
)
from .errors import ConfigError, NonFiniteError, ParseError, RangeError
from .evaluation import batch_recall, fixed_batches, global_recall, performance_drop
from .fedtrain import initial_table, train_centralized, train_federated
from .losses import KINDS
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAIN = 4

CSV_FIELDS = (
    "run_id",
    "round",
    "split",
    "mode",
    "recall_at_1",
    "recall_at_5",
    "recall_at_10",
    "train_loss",
    "wall_ms",
)
METRICS_FILE = "metrics.csv"
CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "checkpoint.fdrm"
BEST_CHECKPOINT_FILE = "checkpoint_best.fdrm"
TUNING_LRS = (0.01, 0.05, 0.1, 0.5)


class ExperimentError(Exception):
    """A run failed; ``stage`` names where and ``exit_code`` what kind of failure."""

    def __init__(self, stage, cause, exit_code=EXIT_FAILURE):
        super().__init__(f"stage={stage} cause={cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = exit_code


@dataclass
class MetricsRecord:
    run_id: str
    round: int
    split: str
    mode: str
    recall_at_1: float
    recall_at_5: float
    recall_at_10: float
    train_loss: float
    wall_ms: float


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def write_metrics_csv(path, records):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_FIELDS)
        for r in records:
            writer.writerow([_fmt(getattr(r, name)) for name in CSV_FIELDS])


def _typed(row):
    return MetricsRecord(
        run_id=row["run_id"],
        round=int(row["round"]),
        split=row["split"],
        mode=row["mode"],
        recall_at_1=float(row["recall_at_1"]),
        recall_at_5=float(row["recall_at_5"]),
        recall_at_10=float(row["recall_at_10"]),
        train_loss=float(row["train_loss"]),
        wall_ms=float(row["wall_ms"]),
    )


def read_metrics_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CSV_FIELDS:
            raise ParseError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [_typed(row) for row in reader]


def write_metrics_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(dataclasses.asdict(r)) + "\n")


def read_metrics_jsonl(path):
    with open(path, encoding="utf-8") as fh:
        return [MetricsRecord(**json.loads(line)) for line in fh if line.strip()]


def export_metrics(run_dir, fmt="csv", out_path=None):
    """Re-emit a run's metrics as CSV or JSON lines; returns the written path."""
    src = os.path.join(run_dir, METRICS_FILE)
    if not os.path.exists(src):
        raise ConfigError(f"{run_dir} contains no {METRICS_FILE}")
    records = read_metrics_csv(src)
    if not records:
        raise ConfigError(f"{src} holds no metrics records")
    if fmt == "csv":
        out_path = out_path or os.path.join(run_dir, "export.csv")
        write_metrics_csv(out_path, records)
    elif fmt in ("jsonl", "json_lines"):
        out_path = out_path or os.path.join(run_dir, "metrics.jsonl")
        write_metrics_jsonl(out_path, records)
    else:
        raise ConfigError(f"unknown export format {fmt!r}")
    return out_path


def _is_cache(path):
    with open(path, "rb") as fh:
        return fh.read(4) == CACHE_MAGIC


def load_clients(data_cfg, seed):
    """Per-user clients and table vocabulary for ``data_cfg.source``."""
    if data_cfg.source == cfgmod.SYNTHETIC:
        clients = synth_dataset(
            data_cfg.synth_users,
            data_cfg.synth_vocab,
            data_cfg.synth_skew,
            seed,
            window=data_cfg.window,
            min_len=data_cfg.synth_min_len,
            mean_extra_len=data_cfg.synth_extra_len,
            topic_size=data_cfg.synth_topic_size,
        )
        return clients, data_cfg.synth_vocab
    path = data_cfg.source
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    if _is_cache(path):
        examples, vocab = read_examples_cache(path)
        return clients_from_examples(examples), vocab
    return build_clients(parse_ratings(path), data_cfg.window), ML1M_VOCAB


def resolve(cfg, vocab):
    """Fill in values that depend on the data or on other settings."""
    model = cfg.model
    if model.vocab != vocab:
        model = dataclasses.replace(model, vocab=vocab)
    train = cfg.train
    if cfg.data.split == CENTRALIZED:
        train = dataclasses.replace(train, algorithm="centralized")
    elif train.algorithm == "centralized":
        raise ConfigError(f"split {cfg.data.split!r} needs train.algorithm fedavg or fedsgd")
    run = cfg.run
    if not run.run_id:
        run = dataclasses.replace(run, run_id=f"{cfg.loss.kind}_{cfg.data.split}")
    return dataclasses.replace(cfg, model=model, train=train, run=run)


def _eval_subset(examples, limit, seed):
    if not limit or len(examples) <= limit:
        return examples
    idx = np.sort(np.random.default_rng([seed, 17]).permutation(len(examples))[:limit])
    return examples.subset(idx)


def _as_examples(payload):
    return payload if isinstance(payload, ExampleSet) else pool(payload)


@dataclass
class RunResult:
    run_id: str
    run_dir: str
    config: object
    records: list
    final: dict = field(default_factory=dict)  # (split, mode) -> RecallReport
    table: np.ndarray = None
    best_round: int = None


def run_experiment(cfg, clients=None, vocab=None):
    """Execute one configured run and write its artifacts.

    ``clients``/``vocab`` may be supplied to skip loading the dataset again
    (used by the grid). Raises :class:`ExperimentError` on failure.
    """
    stage = "ingest"
    try:
        if clients is None:
            clients, vocab = load_clients(cfg.data, cfg.seed)
        stage = "config"
        cfg = resolve(cfg, vocab)
        stage = "split"
        splits = make_splits(clients, cfg.data.split, cfg.seed, cfg.data.train_fraction,
                             cfg.data.central_val_fraction)
    except FileNotFoundError as exc:
        raise ExperimentError(stage, f"dataset not found: {exc}", EXIT_DATA) from exc
    except (ParseError, RangeError) as exc:
        raise ExperimentError(stage, str(exc), EXIT_DATA) from exc
    except ConfigError as exc:
        raise ExperimentError(stage, str(exc), EXIT_CONFIG) from exc

    run_dir = cfg.run.output_dir
    os.makedirs(run_dir, exist_ok=True)
    with open(os.path.join(run_dir, CONFIG_FILE), "w", encoding="utf-8") as fh:
        fh.write(cfgmod.dumps(cfg))

    eval_sets = {}
    for split_name in ("val", "test"):
        examples = _as_examples(getattr(splits, split_name))
        if len(examples):
            eval_sets[split_name] = _eval_subset(examples, cfg.eval.max_examples, cfg.seed)

    if cfg.eval.select_best and "val" not in eval_sets:
        raise ExperimentError("config", "eval.select_best needs a validation split", EXIT_CONFIG)
    records, final = [], {}
    best = {"score": -1.0, "round": None, "final": {}, "table": None}
    started = time.perf_counter()

    def on_eval(round_index, table, train_loss):
        wall = 1000.0 * (time.perf_counter() - started) if cfg.run.record_wall_time else 0.0
        final.clear()
        for split_name, examples in eval_sets.items():
            reports = (
                global_recall(table, examples.contexts, examples.labels, eps=cfg.model.norm_eps),
                batch_recall(table, fixed_batches(examples, cfg.eval.batch_size, cfg.seed),
                             eps=cfg.model.norm_eps),
            )
            for report in reports:
                final[(split_name, report.mode)] = report
                records.append(MetricsRecord(
                    cfg.run.run_id, round_index, split_name, report.mode,
                    *(report.at(k) for k in (1, 5, 10)), float(train_loss), wall,
                ))
        if cfg.eval.select_best and final[("val", "global")].at(10) > best["score"]:
            best.update(score=final[("val", "global")].at(10), round=round_index,
                        final=dict(final), table=table.copy())

    def on_checkpoint(round_index, table):
        save_checkpoint(os.path.join(run_dir, f"checkpoint_{round_index:06d}.fdrm"), table)

    table, start = None, cfg.run.resume_round
    if cfg.run.resume_checkpoint:
        table = load_checkpoint(cfg.run.resume_checkpoint)
        if table.shape != (cfg.model.vocab, cfg.model.dim):
            raise ExperimentError("train", f"checkpoint shape {table.shape} does not match model",
                                  EXIT_CONFIG)

    stage = "train"
    try:
        if cfg.data.split == CENTRALIZED:
            table, history = train_centralized(splits.train, cfg.model, cfg.loss, cfg.train, on_eval,
                                               table, start, on_checkpoint)
        else:
            table, history = train_federated(splits.train, cfg.model, cfg.loss, cfg.train, on_eval,
                                             table, start, on_checkpoint)
        if not history:
            if table is None:
                table = initial_table(cfg.model, cfg.train)
            on_eval(start, table, float("nan"))
    except ConfigError as exc:
        raise ExperimentError(stage, str(exc), EXIT_CONFIG) from exc
    except NonFiniteError as exc:
        raise ExperimentError(stage, str(exc), EXIT_TRAIN) from exc

    write_metrics_csv(os.path.join(run_dir, METRICS_FILE), records)
    save_checkpoint(os.path.join(run_dir, CHECKPOINT_FILE), table)
    if cfg.eval.select_best:
        save_checkpoint(os.path.join(run_dir, BEST_CHECKPOINT_FILE), best["table"])
        return RunResult(cfg.run.run_id, run_dir, cfg, records, best["final"], best["table"], best["round"])
    return RunResult(cfg.run.run_id, run_dir, cfg, records, dict(final), table)


# --- experiment grid ---------------------------------------------------------

PRESETS = {
    "toy_grid": [
        ("data.source", "synthetic"),
        ("data.synth_users", "300"),
        ("data.synth_vocab", "200"),
        ("data.synth_skew", "3.0"),
        ("data.central_val_fraction", "0.1"),
        ("model.dim", "16"),
        ("train.batch_size", "16"),
        ("train.client_lr", "0.1"),
        ("train.epochs", "20"),
        ("train.rounds", "150"),
        ("train.clients_per_round", "100"),
        ("train.eval_every", "0"),
        ("eval.select_best", "true"),
    ],
    "paper_grid": [
        ("data.source", "ml-1m/ratings.dat"),
        ("data.central_val_fraction", "0.01"),
        ("model.dim", "16"),
        ("train.batch_size", "16"),
        ("train.clients_per_round", "100"),
        ("train.epochs", "3"),
        ("train.rounds", "1000"),
        ("train.eval_every", "0"),
        ("eval.max_examples", "20000"),
        ("eval.select_best", "true"),
    ],
}
TUNED_PRESETS = {"paper_grid"}
GRID_CELLS = tuple((k, "centralized") for k in KINDS) + tuple((k, "federated") for k in KINDS) + (
    ("BS", FEDERATED_SHUFFLED),
)


@dataclass
class CellResult:
    kind: str
    mode: str
    run_dir: str
    global_recall: object
    batch_recall: object
    client_lr: float


@dataclass
class GridSummary:
    preset: str
    cells: dict = field(default_factory=dict)  # (kind, mode) -> CellResult
    failures: dict = field(default_factory=dict)  # (kind, mode) -> message

    def drop(self, kind, k, which="global_recall"):
        central = getattr(self.cells[(kind, "centralized")], which).at(k)
        fed = getattr(self.cells[(kind, "federated")], which).at(k)
        return performance_drop(central, fed)

    def table_text(self):
        """Recall per cell plus the centralized-vs-federated drop per loss, one row per metric."""
        kinds = [k for k in KINDS if (k, "centralized") in self.cells or (k, "federated") in self.cells]
        header = ["", *[f"C-{k}" for k in kinds], *[f"F-{k}" for k in kinds], *[f"Drop-{k}" for k in kinds]]
        if ("BS", FEDERATED_SHUFFLED) in self.cells:
            header.append("FS-BS")
        lines = [" | ".join(header)]
        for which, label in (("global_recall", "R"), ("batch_recall", "BR")):
            for k in (1, 5, 10):
                row = [f"{label}@{k}"]
                for mode in ("centralized", "federated"):
                    for kind in kinds:
                        cell = self.cells.get((kind, mode))
                        row.append(f"{getattr(cell, which).at(k):.2f}" if cell else "fail")
                for kind in kinds:
                    try:
                        row.append(f"{self.drop(kind, k, which):.2f}%")
                    except (KeyError, ConfigError):
                        row.append("n/a")
                if ("BS", FEDERATED_SHUFFLED) in self.cells:
                    row.append(f"{getattr(self.cells[('BS', FEDERATED_SHUFFLED)], which).at(k):.2f}")
                lines.append(" | ".join(row))
        for key, msg in sorted(self.failures.items()):
            lines.append(f"FAILED {key[0]}/{key[1]}: {msg}")
        return "\n".join(lines) + "\n"

    def write(self, output_dir):
        os.makedirs(output_dir, exist_ok=True)
        with open(os.path.join(output_dir, "summary.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.table_text())
        with open(os.path.join(output_dir, "summary.csv"), "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(("kind", "mode", "metric", "k", "value", "client_lr"))
            for (kind, mode), cell in sorted(self.cells.items()):
                for which in ("global_recall", "batch_recall"):
                    for k in (1, 5, 10):
                        writer.writerow((kind, mode, which, k, repr(getattr(cell, which).at(k)), cell.client_lr))


def cell_config(base_pairs, kind, mode, output_dir, extra=()):
    pairs = list(base_pairs) + [
        ("loss.kind", kind),
        ("data.split", mode),
        ("run.run_id", f"{kind}_{mode}"),
        ("run.output_dir", os.path.join(output_dir, f"{kind}_{mode}")),
    ]
    return cfgmod.build(pairs + list(extra))


def _score(result):
    report = result.final.get(("val", "global"))
    if report is None:
        raise ConfigError("learning-rate tuning needs a validation split")
    return report.at(10)


def run_grid(preset, overrides=(), output_dir="runs/grid", tune=None, cells=GRID_CELLS):
    """Run every (loss, regime) cell of a preset and summarise the results.

    ``overrides`` are ``(key, value)`` pairs applied on top of the preset;
    they must include ``seed`` unless the preset supplies one. With ``tune``
    (default for tuned presets) each cell sweeps the client learning rate and
    keeps the one with the best validation recall@10.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; expected one of {sorted(PRESETS)}")
    base = PRESETS[preset] + list(overrides)
    if tune is None:
        tune = preset in TUNED_PRESETS
    if not any(k == "seed" for k, _ in base):
        raise ConfigError("grid needs a seed override")
    probe = cfgmod.build(base)
    try:
        clients, vocab = load_clients(probe.data, probe.seed)
    except FileNotFoundError as exc:
        raise ExperimentError("ingest", f"dataset not found: {exc}", EXIT_DATA) from exc
    summary = GridSummary(preset)
    for kind, mode in cells:
        try:
            if tune:
                best = None
                for lr in TUNING_LRS:
                    cfg = cell_config(base, kind, mode, os.path.join(output_dir, f"lr_{lr}"),
                                      [("train.client_lr", repr(lr))])
                    result = run_experiment(cfg, clients, vocab)
                    if best is None or _score(result) > _score(best):
                        best = result
                result = best
            else:
                result = run_experiment(cell_config(base, kind, mode, output_dir), clients, vocab)
            summary.cells[(kind, mode)] = CellResult(
                kind, mode, result.run_dir,
                result.final[("test", "global")], result.final[("test", "batch")],
                result.config.train.client_lr,
            )
            log.info("cell %s/%s done: %s", kind, mode, result.final[("test", "global")].recalls)
        except (ExperimentError, ConfigError) as exc:
            summary.failures[(kind, mode)] = str(exc)
            log.error("cell %s/%s failed: %s", kind, mode, exc)
    summary.write(output_dir)
    return summary
