"""Experiment orchestration: config, pipeline, diagnostic studies and CLI."""

from .config import AttackConfig, ConfigError, ExperimentConfig, from_dict, load_config
from .pipeline import METHODS, SeedRun, StageError, build_seed, clear_cache, read_results, run_pipeline
from .studies import beta_sweep, profile_heatmap, threshold_tradeoff

__all__ = [
    "AttackConfig", "ConfigError", "ExperimentConfig", "from_dict", "load_config",
    "METHODS", "SeedRun", "StageError", "build_seed", "clear_cache", "read_results", "run_pipeline",
    "beta_sweep", "profile_heatmap", "threshold_tradeoff",
]
