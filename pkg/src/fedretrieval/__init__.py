"""Federated training of ID-based dual-encoder retrieval models."""

from .errors import ConfigError, NonFiniteError, ParseError, RangeError
from .losses import LossConfig, LossOutput, compose
from .model import ModelConfig

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "LossConfig",
    "LossOutput",
    "ModelConfig",
    "NonFiniteError",
    "ParseError",
    "RangeError",
    "compose",
]
