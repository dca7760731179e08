"""Federated exemplar-based anomaly detection for multivariate time series."""
from .config import ExperimentConfig, load_config
from .orchestrator import RoundReport, run_experiment, run_round

__all__ = ["ExperimentConfig", "load_config", "RoundReport", "run_experiment", "run_round"]
__version__ = "0.1.0"
