"""
l2l-pcm: learning-to-learn with few-shot classifiers and one-shot spiking motor
controllers on simulated phase-change memory crossbars.
"""

__version__ = "0.1.0"

from l2l_pcm.config import ExperimentConfig, parse_config
from l2l_pcm.experiment_manager import ExperimentManager, run_experiment

__all__ = ["ExperimentConfig", "ExperimentManager", "parse_config", "run_experiment"]
