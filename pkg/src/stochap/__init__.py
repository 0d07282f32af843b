"""Asymptotic-preserving micro-macro schemes for a kinetic equation with multiplicative noise."""

from .collision import CollisionKernel, CollisionOperator, ScatterField, diffusion_coefficient
from .errors import (
    AlignmentError,
    BlowUpError,
    ConfigError,
    DimensionError,
    EnsembleError,
    NumericalError,
    PreconditionError,
    StochapError,
)
from .grid import DUAL, PRIMAL, StaggeredGrid1D, VelocityQuadrature
from .noise import DrawStream, GaussianDraw, NoiseModel, build_paper_noise, constant_noise, empty_noise
from .scheme_smm import SchemeConfig, TelegraphState, step_smm, step_telegraph

__version__ = "0.1.0"

__all__ = [
    "AlignmentError", "BlowUpError", "CollisionKernel", "CollisionOperator", "ConfigError",
    "DUAL", "DimensionError", "DrawStream", "EnsembleError", "GaussianDraw", "NoiseModel",
    "NumericalError", "PRIMAL", "PreconditionError", "ScatterField", "SchemeConfig",
    "StaggeredGrid1D", "StochapError", "TelegraphState", "VelocityQuadrature",
    "build_paper_noise", "constant_noise", "diffusion_coefficient", "empty_noise",
    "step_smm", "step_telegraph",
]
