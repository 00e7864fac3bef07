"""Cluster-aware adaptive federated pruning for 1-D CNN activity recognition."""

__version__ = "0.1.0"

from .config import ExperimentConfig, load_config
from .errors import ConfigError, DataError
from .federation import Experiment, ExperimentResult, run_baseline, run_caafp, run_experiment

__all__ = [
    "ConfigError",
    "DataError",
    "Experiment",
    "ExperimentConfig",
    "ExperimentResult",
    "load_config",
    "run_baseline",
    "run_caafp",
    "run_experiment",
]
