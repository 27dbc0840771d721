"""Batch experiment pipeline and CLI."""
from .config import ConfigError, ExperimentConfig, from_dict, load_config
from .pipeline import PipelineError

__all__ = ["ConfigError", "ExperimentConfig", "PipelineError", "from_dict", "load_config"]
