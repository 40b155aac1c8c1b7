"""Command-line entry point: ``fedretrieval <subcommand> ...``."""

import argparse
import logging
import sys

import numpy as np

from . import config as cfgmod
from . import runner
from .data import (
    ML1M_RATINGS,
    ClientDataset,
    build_clients,
    parse_ratings,
    pool,
    synth_dataset,
    write_examples_cache,
    ML1M_VOCAB,
)
from .errors import ConfigError, ParseError, RangeError
from .fedtrain import prop1_harness
from .losses import KINDS, LossConfig, certify_batch_insensitive, even_partition
from .model import ModelConfig, init_params

log = logging.getLogger("fedretrieval")


def _fail(stage, cause, code):
    print(f"error: stage={stage} cause={cause}", file=sys.stderr)
    return code


def cmd_ingest(args):
    try:
        ratings = parse_ratings(args.ratings)
    except FileNotFoundError as exc:
        return _fail("ingest", f"dataset not found: {exc}", runner.EXIT_DATA)
    except (ParseError, RangeError) as exc:
        return _fail("ingest", exc, runner.EXIT_DATA)
    clients = build_clients(ratings, args.window)
    examples = pool(clients)
    write_examples_cache(args.out, examples, ML1M_VOCAB)
    print(f"ratings={len(ratings)} users={len(clients)} examples={len(examples)} -> {args.out}")
    return runner.EXIT_OK


def cmd_verify(args):
    try:
        n = len(parse_ratings(args.ratings))
    except FileNotFoundError as exc:
        return _fail("verify", f"dataset not found: {exc}", runner.EXIT_DATA)
    except (ParseError, RangeError) as exc:
        return _fail("verify", exc, runner.EXIT_DATA)
    ok = n == ML1M_RATINGS
    print(f"ratings={n} expected={ML1M_RATINGS} {'OK' if ok else 'MISMATCH'}")
    return runner.EXIT_OK if ok else runner.EXIT_DATA


def _overrides(args):
    pairs = [cfgmod.parse_override(item) for item in args.set or ()]
    if getattr(args, "seed", None) is not None:
        pairs.append(("seed", str(args.seed)))
    if getattr(args, "output", None):
        pairs.append(("run.output_dir", args.output))
    return pairs


def cmd_train(args):
    try:
        text = ""
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                text = fh.read()
        cfg = cfgmod.loads(text, _overrides(args))
    except FileNotFoundError as exc:
        return _fail("config", f"config not found: {exc}", runner.EXIT_CONFIG)
    except ConfigError as exc:
        return _fail("config", exc, runner.EXIT_CONFIG)
    try:
        result = runner.run_experiment(cfg)
    except runner.ExperimentError as exc:
        return _fail(exc.stage, exc.cause, exc.exit_code)
    for (split, mode), report in sorted(result.final.items()):
        print(f"{result.run_id} {split} {mode} " + " ".join(f"R@{k}={r:.4f}" for k, r in zip(report.ks, report.recalls)))
    print(f"artifacts in {result.run_dir}")
    return runner.EXIT_OK


def cmd_grid(args):
    overrides = [cfgmod.parse_override(item) for item in args.set or ()]
    if args.seed is not None:
        overrides.append(("seed", str(args.seed)))
    if args.ratings:
        overrides.append(("data.source", args.ratings))
    try:
        summary = runner.run_grid(args.preset, overrides, args.output, tune=args.tune)
    except runner.ExperimentError as exc:
        return _fail(exc.stage, exc.cause, exc.exit_code)
    except ConfigError as exc:
        return _fail("config", exc, runner.EXIT_CONFIG)
    print(summary.table_text(), end="")
    return runner.EXIT_OK if not summary.failures else runner.EXIT_TRAIN


def cmd_export(args):
    try:
        path = runner.export_metrics(args.run_dir, args.format, args.out)
    except (ConfigError, ParseError) as exc:
        return _fail("export", exc, runner.EXIT_CONFIG)
    print(path)
    return runner.EXIT_OK


def _random_instance(seed, num_clients, vocab=50, dim=8, min_size=1, max_size=40):
    rng = np.random.default_rng(seed)
    clients = []
    for user, c in enumerate(synth_dataset(num_clients, vocab, 1.0, seed, min_len=max_size + 1, mean_extra_len=0)):
        size = int(rng.integers(min_size, max_size + 1))
        clients.append(ClientDataset(user, c.examples.subset(np.arange(size))))
    table = init_params(ModelConfig(vocab, dim), seed)
    return clients, table


def cmd_prop1(args):
    loss = LossConfig(kind=args.loss, alpha=args.alpha)
    min_size = loss.min_batch_size
    clients, table = _random_instance(args.seed, args.clients, min_size=min_size)
    result = prop1_harness(clients, loss, table, args.lr)
    sizes = [len(c) for c in clients]
    print(f"loss={args.loss} clients={sizes} max_rel_diff={result.max_rel_diff:.3e}")
    return runner.EXIT_OK


def cmd_certify(args):
    loss = LossConfig(kind=args.loss, alpha=args.alpha)
    clients, table = _random_instance(args.seed, 1, min_size=args.examples, max_size=args.examples)
    ex = clients[0].examples
    n = len(ex)
    partitions = [even_partition(n, m) for m in (1, 2, 4, n)]
    report = certify_batch_insensitive(table, ex.contexts, ex.labels, partitions, loss)
    verdict = "batch-insensitive" if report.insensitive else "batch-sensitive"
    print(f"loss={args.loss} value_spread={report.value_spread:.3e} grad_spread={report.grad_spread:.3e} {verdict}")
    return runner.EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(prog="fedretrieval", description="Federated dual-encoder retrieval experiments")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="parse ratings.dat and write an FDR1 example cache")
    p.add_argument("--ratings", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=10)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("verify-dataset", help="check a MovieLens 1M ratings file")
    p.add_argument("--ratings", required=True)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("train", help="run one experiment")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int)
    p.add_argument("--output")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("grid", help="run a preset grid of losses x regimes")
    p.add_argument("--preset", choices=sorted(runner.PRESETS), default="toy_grid")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratings", help="ratings.dat or FDR1 cache (paper_grid)")
    p.add_argument("--output", default="runs/grid")
    p.add_argument("--tune", action=argparse.BooleanOptionalAction, default=None)
    p.set_defaults(func=cmd_grid)

    p = sub.add_parser("export", help="export a run's metrics")
    p.add_argument("--run-dir", required=True)
    p.add_argument("--format", choices=("csv", "jsonl"), default="csv")
    p.add_argument("--out")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("prop1-check", help="compare one FedSGD round with pooled SGD")
    p.add_argument("--loss", choices=KINDS, default="GS")
    p.add_argument("--clients", type=int, default=5)
    p.add_argument("--lr", type=float, default=0.1)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prop1)

    p = sub.add_parser("certify-loss", help="check a loss for batch insensitivity")
    p.add_argument("--loss", choices=KINDS, default="H_S")
    p.add_argument("--examples", type=int, default=16)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_certify)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
