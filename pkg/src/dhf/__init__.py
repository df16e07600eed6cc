"""Coherent probabilistic forecasting for large collections of related time series.

The package builds bottom-level forecast distributions whose covariance is kept
in low-rank-plus-diagonal form, reconciles them against forecasts of aggregate
series, and scores the results against standard reconciliation baselines.
"""

from dhf.hierarchy import Hierarchy, SummingMatrix, build_hierarchy, check_coherence
from dhf.factor_cov import GaussianFactorMoments

__all__ = [
    "Hierarchy",
    "SummingMatrix",
    "build_hierarchy",
    "check_coherence",
    "GaussianFactorMoments",
]

__version__ = "0.1.0"
