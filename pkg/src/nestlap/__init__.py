"""Approximate Bayesian inference for latent Gaussian models by nested Laplace approximations."""

from .hyperparams import HyperVector, log_prior
from .inner import GaussianApprox, LatentPosterior, fit_gaussian_approx, log_posterior_theta
from .latent import CopyLink, Graph, LatentComponent
from .likelihoods import Likelihood
from .marginals import Marginal
from .model import Effect, FixedEffect, LinComb, ModelSpec, SpecError, parse, serialize, validate
from .pipeline import FitResult, NumericalFailure, RunConfig, fit

__all__ = [
    "CopyLink",
    "Effect",
    "FitResult",
    "FixedEffect",
    "GaussianApprox",
    "Graph",
    "HyperVector",
    "LatentComponent",
    "LatentPosterior",
    "Likelihood",
    "LinComb",
    "Marginal",
    "ModelSpec",
    "NumericalFailure",
    "RunConfig",
    "SpecError",
    "fit",
    "fit_gaussian_approx",
    "log_posterior_theta",
    "log_prior",
    "parse",
    "serialize",
    "validate",
]
