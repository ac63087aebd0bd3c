"""Sketch-based per-key frequency measurement with a self-supervised learned decoder."""

from .core import Config, ConfigError, ModelConfig, SketchConfig, TrainConfig, load_config, preset
from .dataplane import DataPlane, Snapshot
from .streamgen import ZipfSpec

__version__ = "0.1.0"

__all__ = ["Config", "ConfigError", "DataPlane", "ModelConfig", "SketchConfig", "Snapshot", "TrainConfig",
           "ZipfSpec", "load_config", "preset"]
