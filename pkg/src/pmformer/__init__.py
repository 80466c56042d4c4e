"""Partial-multivariate transformer forecasting on a small numpy autodiff engine."""

from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError,
                     ParameterError, PMformerError, TrainingError)
from .model import ModelConfig, forward, init_params, load_checkpoint, save_checkpoint
from .training import TrainConfig, train

__version__ = "0.1.0"
