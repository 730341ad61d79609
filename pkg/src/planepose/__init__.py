"""Plane pose regression from 2D slices of 3D volumes.

Multi-head rotation regressors with heteroscedastic variances, uncertainty
baselines (deep ensembles, MC dropout, evidential regression) and a small
reverse-mode autodiff core, all on numpy.
"""

from .geom import PlanePose, RotationParam, SimTransform
from .net import Model, ModelConfig, count_params
from .volume import SliceImage, Volume, generate_phantom, sample_slice

__all__ = [
    "Model",
    "ModelConfig",
    "PlanePose",
    "RotationParam",
    "SimTransform",
    "SliceImage",
    "Volume",
    "count_params",
    "generate_phantom",
    "sample_slice",
]
__version__ = "0.1.0"
