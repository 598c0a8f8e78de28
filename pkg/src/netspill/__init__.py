"""Estimation of direct and spillover effects on partially interfering
networks with censored outcomes, via inverse-probability weighting with
mixed-model propensity and censoring weights and closed-form sandwich
variances. Includes generators and a simulation harness for evaluating
finite-sample bias and coverage.
"""
__version__ = "0.1.0"

from .errors import (
    ConvergenceError,
    EmptyNetworkError,
    GenerationError,
    InputError,
    NetspillError,
    NumericalError,
    PositivityError,
)
from .estimator import StudyData, effects, ipcw_estimates
from .netgraph import Network, Partition, build_network, fast_greedy_communities
from .variance import sandwich
from .weights import Allocation

__all__ = [
    "Allocation",
    "ConvergenceError",
    "EmptyNetworkError",
    "GenerationError",
    "InputError",
    "NetspillError",
    "Network",
    "NumericalError",
    "Partition",
    "PositivityError",
    "StudyData",
    "build_network",
    "effects",
    "fast_greedy_communities",
    "ipcw_estimates",
    "sandwich",
]
