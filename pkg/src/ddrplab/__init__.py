"""Directional relative position encodings for Transformer language models,
with token/head cosine-differentiation training objectives and diagnostics."""

from .errors import (
    ConfigError,
    ContractError,
    DivergenceError,
    InputError,
    NonFiniteError,
    ShapeError,
)
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .relpos import KINDS, RelPosIndexer, extra_param_count
from .tensor import Tensor, no_grad

__all__ = [
    "ConfigError",
    "ContractError",
    "DivergenceError",
    "InputError",
    "KINDS",
    "ModelConfig",
    "NonFiniteError",
    "RelPosIndexer",
    "ShapeError",
    "Tensor",
    "extra_param_count",
    "forward",
    "init_params",
    "load_checkpoint",
    "no_grad",
    "save_checkpoint",
]

__version__ = "0.1.0"
