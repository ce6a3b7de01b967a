"""Bias-controlled out-of-distribution generalization benchmark harness.

Datasets pair each category with a nuisance condition; training sees only a
subset of the category x condition grid and OoD accuracy is measured on the
held-out combinations. The package covers data generation, combination
ladders and splits, a from-scratch neural core, training with three OoD
approaches, selectivity/invariance analysis, and experiment orchestration.
"""

from . import analysis, config, datagen, experiment, neuralcore, splits, training
from .errors import OodbenchError

__all__ = [
    "OodbenchError",
    "analysis",
    "config",
    "datagen",
    "experiment",
    "neuralcore",
    "splits",
    "training",
]

__version__ = "0.1.0"
