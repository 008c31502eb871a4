"""Bayesian multivariate density regression with categorical covariates."""
from .dist import DomainError, ParameterError
from .estimators import (DensityEstimate, GridMismatchError, ari, cond_joint_density,
                         cond_marginal_density, correlation_estimate, ise, make_grid,
                         map_partitions, score_against_truth, uncond_density)
from .kernels import BACKEND
from .sampler import (Dataset, Hyperparameters, IngestionError, PosteriorDraws, Sampler,
                      run_chain)
from .simgen import TrueModel, scenario1, scenario2, survey_artifact

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Dataset", "DensityEstimate", "DomainError", "GridMismatchError", "Hyperparameters",
    "IngestionError", "ParameterError", "PosteriorDraws", "Sampler", "TrueModel", "ari",
    "cond_joint_density", "cond_marginal_density", "correlation_estimate", "ise", "make_grid",
    "map_partitions", "run_chain", "scenario1", "scenario2", "score_against_truth",
    "survey_artifact", "uncond_density",
]
