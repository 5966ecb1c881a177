"""Sparse point-source recovery for convection-diffusion from laser line-of-sight data."""
from .config import PRESETS, ExperimentConfig, load_config
from .forward import PhysicalParams, SimSpec
from .measure import DiracMeasure
from .mesh import build_mesh

__all__ = ["PRESETS", "DiracMeasure", "ExperimentConfig", "PhysicalParams", "SimSpec", "build_mesh", "load_config"]
__version__ = "0.1.0"
