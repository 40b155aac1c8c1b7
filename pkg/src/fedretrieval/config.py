"""Experiment configuration: flat ``section.key = value`` text files.

Example::

    seed = 7
    data.source = synthetic
    data.split = federated
    loss.kind = GS
    train.rounds = 200

Every section maps onto a dataclass; values are coerced to the field's type.
:func:`dumps` writes all fields, defaults included, so a snapshot fully
describes a run.
"""

import dataclasses
import typing
from dataclasses import dataclass, field

from .data import SPLIT_MODES
from .errors import ConfigError
from .fedtrain import TrainConfig
from .losses import LossConfig
from .model import ModelConfig

SYNTHETIC = "synthetic"


@dataclass
class DataConfig:
    source: str = SYNTHETIC
    split: str = "federated"
    window: int = 10
    train_fraction: float = 0.9
    central_val_fraction: float = 0.0
    synth_users: int = 300
    synth_vocab: int = 200
    synth_skew: float = 3.0
    synth_min_len: int = 20
    synth_extra_len: int = 20
    synth_topic_size: int = 1

    def __post_init__(self):
        if self.split not in SPLIT_MODES:
            raise ConfigError(f"unknown split {self.split!r}; expected one of {SPLIT_MODES}")


@dataclass
class EvalConfig:
    batch_size: int = 16
    max_examples: int = 0  # 0 = evaluate every example
    select_best: bool = False  # report the eval round with the best validation recall@10


@dataclass
class RunConfig:
    output_dir: str = "runs/default"
    run_id: str = ""
    record_wall_time: bool = False
    resume_checkpoint: str = ""
    resume_round: int = 0


@dataclass
class ExperimentConfig:
    seed: int
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    run: RunConfig = field(default_factory=RunConfig)


SECTIONS = ("data", "model", "loss", "train", "eval", "run")
_SECTION_TYPES = {
    "data": DataConfig,
    "model": ModelConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
    "run": RunConfig,
}


def _coerce(raw, tp, key):
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None


def _format(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_pairs(text):
    """Parse ``key = value`` lines (``#`` comments, blank lines ignored) in order."""
    pairs = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {n}: expected 'key = value'")
        key, value = line.split("=", 1)
        pairs.append((key.strip(), value.strip()))
    return pairs


def build(pairs):
    """Construct an :class:`ExperimentConfig` from ``(key, value)`` pairs; later keys win."""
    values = {name: {} for name in SECTIONS}
    seed = None
    for key, raw in pairs:
        if key == "seed":
            seed = _coerce(raw, int, key)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTION_TYPES or not name:
            raise ConfigError(f"unknown config key {key!r}")
        hints = typing.get_type_hints(_SECTION_TYPES[section])
        if name not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        values[section][name] = _coerce(raw, hints[name], key)
    if seed is None:
        raise ConfigError("config must set 'seed'")
    sections = {name: _SECTION_TYPES[name](**values[name]) for name in SECTIONS}
    sections["train"] = dataclasses.replace(sections["train"], seed=seed)
    return ExperimentConfig(seed=seed, **sections)


def loads(text, overrides=()):
    return build(parse_pairs(text) + list(overrides))


def load(path, overrides=()):
    with open(path, encoding="utf-8") as fh:
        return loads(fh.read(), overrides)


def parse_override(item):
    """``"loss.alpha=0.2"`` -> ``("loss.alpha", "0.2")``."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like key=value")
    key, value = item.split("=", 1)
    return key.strip(), value.strip()


def to_pairs(cfg):
    pairs = [("seed", _format(cfg.seed))]
    for name in SECTIONS:
        section = getattr(cfg, name)
        for f in dataclasses.fields(section):
            if name == "train" and f.name == "seed":
                continue
            pairs.append((f"{name}.{f.name}", _format(getattr(section, f.name))))
    return pairs


def dumps(cfg):
    return "".join(f"{k} = {v}\n" for k, v in to_pairs(cfg))


def with_overrides(cfg, overrides):
    """Re-build ``cfg`` with extra ``(key, value)`` pairs applied on top."""
    return build(to_pairs(cfg) + list(overrides))
