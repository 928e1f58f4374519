"""Rehearsal-based class-incremental training with aligned weight merging, on a small numpy engine."""

from .buffer import MemoryBuffer
from .config import ExperimentConfig, load_config, parse_config
from .lsap import solve_lsap
from .matching import (Permutation, apply_permutation, calc_permutation, clewi_task_step, collect_activations,
                       interpolate, repair_affine, update_batchnorm)
from .models import ModelArch, ParamSet, build_model, forward, param_count, permutation_spec_of

__all__ = [
    "ExperimentConfig", "MemoryBuffer", "ModelArch", "ParamSet", "Permutation", "apply_permutation",
    "build_model", "calc_permutation", "clewi_task_step", "collect_activations", "forward", "interpolate",
    "load_config", "param_count", "parse_config", "permutation_spec_of", "repair_affine", "solve_lsap",
    "update_batchnorm",
]
