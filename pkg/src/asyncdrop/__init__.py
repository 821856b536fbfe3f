"""Asynchronous federated learning with distributed dropout."""

from .errors import (AsyncDropError, ConfigError, ContractError, DegenerateMaskError,
                     DimensionError, GenerationError, NumericError, ParseError)
from .masking import DropoutMask, ScoreTable, random_mask, theta
from .nn import CnnModel, Dataset, MlpModel
from .params import ModelParams
from .store import BUFFERED, GlobalStore, UpdateEnvelope
from .strategies import Kind, StrategySpec

__version__ = "0.1.0"
