"""Experiment orchestration: configs, training and evaluation loops, records, CLI."""
from .config import ExperimentConfig, load_config
from .experiment import run_eval, run_training, sweep

__all__ = ["ExperimentConfig", "load_config", "run_eval", "run_training", "sweep"]
