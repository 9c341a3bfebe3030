"""Dynamic context-guided capsule routing for multimodal machine translation.

A small, dependency-light implementation: a reverse-mode autodiff engine on
numpy, a Transformer encoder-decoder, capsule routing guided by the
decoder's source-side context, gated fusion of global and regional visual
features, a synthetic word-sense disambiguation task, and the tooling to
train, evaluate and inspect models.
"""

from .config import VARIANTS, ModelConfig, RunConfig, TrainConfig
from .errors import (ConfigError, DCCNError, DimensionError, FormatError, InputError, NumericError,
                     UsageError)
from .multimodal import DCCNModel, FeatureBatch, fuse_gate
from .routing import DCCN, pcc, route, route_conventional, squash

__version__ = "0.1.0"

__all__ = [
    "VARIANTS", "ModelConfig", "RunConfig", "TrainConfig",
    "ConfigError", "DCCNError", "DimensionError", "FormatError", "InputError", "NumericError", "UsageError",
    "DCCNModel", "FeatureBatch", "fuse_gate",
    "DCCN", "pcc", "route", "route_conventional", "squash",
]
