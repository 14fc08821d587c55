"""Percentile-distribution multiple-instance survival learning.

Tile feature bags are scored tile by tile, the scores are read off at fixed
percentiles of their distribution, and a small network maps that vector to
a Cox log relative hazard.
"""

from .data import FeatureBag, SurvivalLabel, SyntheticSpec, generate_synthetic, read_bag, write_bag
from .harness import Dataset, TrainConfig, cross_validate, risk_stratify, train
from .pooling import PercentileScheme, PoolingStrategy, percentile_strategy, pool
from .survival import c_index, cox_nll, cox_nll_grad, km_estimate, logrank_test

__version__ = "0.1.0"
