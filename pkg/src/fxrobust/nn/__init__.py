from .adam import AdamState, adam_step
from .checkpoint import load_checkpoint, save_checkpoint
from .layers import NumericalError
from .model import ForwardTrace, Model, ModelConfig, init_params, parameter_count

__all__ = [
    "AdamState",
    "ForwardTrace",
    "Model",
    "ModelConfig",
    "NumericalError",
    "adam_step",
    "init_params",
    "load_checkpoint",
    "parameter_count",
    "save_checkpoint",
]
