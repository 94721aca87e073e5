"""Surprise-driven exploration for trust-region policy optimisation."""

from .bonus import BonusConfig, SCHEMES
from .config import ConfigError, RunConfig, load_config, parse_config
from .dynamics import DynamicsModel, ReplayMemory, load_checkpoint, save_checkpoint
from .envs import ENV_REGISTRY, make_env
from .trainer import RunArtifacts, TrainingError, read_progress, train
from .trustregion import TrustRegionConfig, solve_step

__all__ = [
    "BonusConfig", "SCHEMES", "ConfigError", "RunConfig", "load_config", "parse_config",
    "DynamicsModel", "ReplayMemory", "load_checkpoint", "save_checkpoint",
    "ENV_REGISTRY", "make_env", "RunArtifacts", "TrainingError", "read_progress", "train",
    "TrustRegionConfig", "solve_step",
]
__version__ = "0.1.0"
