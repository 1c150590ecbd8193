"""Cost-aware, Byzantine-robust hierarchical federated learning simulator."""
from .config import ExperimentConfig, load_config
from .errors import ConfigurationError, ContractError, InvariantError
from .orchestrator import run_comparison, run_experiment

__all__ = [
    "ConfigurationError",
    "ContractError",
    "ExperimentConfig",
    "InvariantError",
    "load_config",
    "run_comparison",
    "run_experiment",
]
