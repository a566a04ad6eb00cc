"""Adaptive-resampling sequential Monte Carlo on finite state spaces.

The package pairs a particle engine (:mod:`adaptsmc.smc`) with exact
oracles (:mod:`adaptsmc.exact`) computed by matrix recursions and block-path
enumeration, so every stochastic output can be compared with its limit.
"""
from .criteria import CriterionKind, CriterionSpec, RandomizedThresholds, Thresholds
from .model import FiniteModel, load_model, make_model, mixing_model, reference_model
from .smc import RunRecord, run_adaptive, run_reference

__version__ = "0.1.0"

__all__ = [
    "CriterionKind", "CriterionSpec", "FiniteModel", "RandomizedThresholds", "RunRecord",
    "Thresholds", "load_model", "make_model", "mixing_model", "reference_model",
    "run_adaptive", "run_reference",
]
