"""Test-time adaptive interpolation between a generalist and an expert model."""

from .coefficient import CoefficientConfig, LambdaRecord, batch_lambda, coefficient_for, coefficients
from .dynamic import ForwardCounter, LambdaCache, precompute_lambdas, predict_with_cache
from .errors import (
    AlignmentError,
    CorruptionError,
    DivergenceError,
    DomainError,
    FormatError,
    StalenessError,
    TTMergeError,
    ValidationError,
)
from .models import Dataset, TrainConfig, finetune, forward, train
from .params import ParameterMap, lerp_params, load_checkpoint, save_checkpoint, slerp_params, soup, task_arithmetic, ties_merge

__version__ = "0.1.0"

__all__ = [
    "AlignmentError",
    "CoefficientConfig",
    "CorruptionError",
    "Dataset",
    "DivergenceError",
    "DomainError",
    "FormatError",
    "ForwardCounter",
    "LambdaCache",
    "LambdaRecord",
    "ParameterMap",
    "StalenessError",
    "TTMergeError",
    "TrainConfig",
    "ValidationError",
    "batch_lambda",
    "coefficient_for",
    "coefficients",
    "finetune",
    "forward",
    "lerp_params",
    "load_checkpoint",
    "precompute_lambdas",
    "predict_with_cache",
    "save_checkpoint",
    "slerp_params",
    "soup",
    "task_arithmetic",
    "ties_merge",
    "train",
]
