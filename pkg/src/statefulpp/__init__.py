"""Repeated risk minimization when the data distribution carries state between rounds."""

from .distribution import MixtureDistribution, Population, ScalarPointMass, StatePoint, product_dist, w1
from .engine import EngineConfig, Trajectory, check_stable_point, detect_oscillation, fixed_classifier_run, rrm_run
from .losses import Classifier, LossModel, MinimizerConfig, minimize, regularized_logistic, scalar_squared
from .transitions import geometric_decay, k_groups, scalar_linear, strategic_response

__all__ = [
    "Classifier",
    "EngineConfig",
    "LossModel",
    "MinimizerConfig",
    "MixtureDistribution",
    "Population",
    "ScalarPointMass",
    "StatePoint",
    "Trajectory",
    "check_stable_point",
    "detect_oscillation",
    "fixed_classifier_run",
    "geometric_decay",
    "k_groups",
    "minimize",
    "product_dist",
    "regularized_logistic",
    "rrm_run",
    "scalar_linear",
    "scalar_squared",
    "strategic_response",
    "w1",
]
