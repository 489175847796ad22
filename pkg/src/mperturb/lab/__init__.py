"""Configuration, orchestration, persistence and validation."""

from .config import ExperimentConfig, load_config, parse_config
from .runner import SUBCOMMANDS, run

__all__ = ["ExperimentConfig", "SUBCOMMANDS", "load_config", "parse_config", "run"]
