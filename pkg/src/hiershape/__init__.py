"""Hierarchical Bayesian models of multigroup shape populations.

Hidden pre-shapes are sampled by projected Hamiltonian Monte Carlo inside a
Monte-Carlo EM loop; fitted groups can be compared by permutation testing and
new shapes classified by Monte-Carlo marginal likelihood.
"""

from .analysis import classify, hotelling_t2, permutation_test, sample_prior_shape
from .data import GroupedDataset, HiddenState, SampleSet
from .inference import EMConfig, FitResult, fit
from .model import KernelConfig, NeighborhoodSystem, PopulationParams
from .sampler import HMCConfig
from .simdata import BoxBumpSpec, simulate

__all__ = [
    "BoxBumpSpec", "EMConfig", "FitResult", "GroupedDataset", "HMCConfig", "HiddenState",
    "KernelConfig", "NeighborhoodSystem", "PopulationParams", "SampleSet", "classify", "fit",
    "hotelling_t2", "permutation_test", "sample_prior_shape", "simulate",
]
