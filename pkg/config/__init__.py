"""
Configuration loader for the detector.
"""

from .settings import ModelConfig, RunConfig, format_model_config, load_model_config, parse_model_config

__all__ = ["ModelConfig", "RunConfig", "format_model_config", "load_model_config", "parse_model_config"]
