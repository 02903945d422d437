"""Arbitrary-scale guided depth upsampling on a small numpy autodiff engine.

The main entry points are :class:`GeoDsrNetwork` for inference,
:func:`run_stage` for training and :func:`benchmark` for evaluation.
"""

from .evaluation import EvalItem, EvalReport, benchmark, rmse
from .geometry import CoordGrid, ScaleSpec, WarpMap, bicubic_resample, make_target_grid, warp_from_affine
from .io import Checkpoint, load_checkpoint, save_checkpoint
from .network import GeoDsrNetwork, NetworkConfig
from .synthetic import SyntheticSceneSpec, gen_synthetic
from .tensor import Tensor
from .training import TrainConfig, degrade_sample, run_stage

__version__ = "0.1.0"

__all__ = [
    "Checkpoint",
    "CoordGrid",
    "EvalItem",
    "EvalReport",
    "GeoDsrNetwork",
    "NetworkConfig",
    "ScaleSpec",
    "SyntheticSceneSpec",
    "Tensor",
    "TrainConfig",
    "WarpMap",
    "benchmark",
    "bicubic_resample",
    "degrade_sample",
    "gen_synthetic",
    "load_checkpoint",
    "make_target_grid",
    "rmse",
    "run_stage",
    "save_checkpoint",
    "warp_from_affine",
]
