"""Switching diffusions with fast mode changes: simulation, large deviations, exit problems."""

__version__ = "0.1.0"

from .model import ModelSpec, ModelConfigError, builtin_model, load_model, model_from_dict, validate_model
from .switching import averaged_drift, generator_at, integrate_averaged, invariant_weights
from .simulate import SimConfig, batch_exit_mc, simulate_until_exit

__all__ = [
    "__version__",
    "ModelSpec",
    "ModelConfigError",
    "builtin_model",
    "load_model",
    "model_from_dict",
    "validate_model",
    "averaged_drift",
    "generator_at",
    "integrate_averaged",
    "invariant_weights",
    "SimConfig",
    "batch_exit_mc",
    "simulate_until_exit",
]
