"""Sketch-based 3D city massing: paired top-down/perspective sketches to
building heightfields and meshes."""

__version__ = "0.1.0"

from .config import PipelineConfig, default_config, tiny_config

__all__ = ["PipelineConfig", "default_config", "tiny_config", "__version__"]
