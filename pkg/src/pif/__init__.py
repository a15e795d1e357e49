"""Local, global and hybrid interaction representations for text classification."""

from .diffcore import DimensionError, DomainError, Parameter, Tensor, grad_check
from .interaction import HirModel, ModelConfig
from .pipeline import PipelineConfig, load_model, run_variant, save_model
from .train import ConfigError, TrainConfig, evaluate, fit

__all__ = [
    "ConfigError",
    "DimensionError",
    "DomainError",
    "HirModel",
    "ModelConfig",
    "Parameter",
    "PipelineConfig",
    "Tensor",
    "TrainConfig",
    "evaluate",
    "fit",
    "grad_check",
    "load_model",
    "run_variant",
    "save_model",
]
