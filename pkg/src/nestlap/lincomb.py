"""Posterior marginals and correlations of linear combinations of the latent field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .marginals import ConditionalMarginals, Marginal, integrate_all
from .sparse import DimensionMismatch

__all__ = [
    "DegenerateLinComb",
    "LinCombMoments",
    "check_B",
    "lincomb_moments",
    "lincomb_fast",
    "lincomb_correlation",
    "mixture_correlation",
]


class DegenerateLinComb(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class LinCombMoments:
    """Per grid point means ``(K, k)`` and covariances ``(K, k, k)`` of ``v = B x``."""

    means: np.ndarray
    covs: np.ndarray
    probs: np.ndarray


def check_B(B, n: int) -> np.ndarray:
    """Dense copy of ``B`` after shape and zero-row checks."""
    B = B.toarray() if sp.issparse(B) else np.atleast_2d(np.asarray(B, dtype=float))
    if B.shape[1] != n:
        raise DimensionMismatch(f"B has {B.shape[1]} columns, latent field has {n}")
    zero = np.flatnonzero(~np.any(B != 0, axis=1))
    if zero.size:
        raise DegenerateLinComb(f"linear combination rows {zero.tolist()} are all zero")
    return B


def lincomb_moments(approxs, probs, B, means=None) -> LinCombMoments:
    """Conditional Gaussian moments of ``B x`` at each grid point.

    ``means[k]`` replaces the mode ``x*`` of point ``k`` (for example by the
    per-element means of a skewness-corrected strategy).
    """
    n = approxs[0].n
    B = check_B(B, n)
    mu = [(ga.x_star if means is None or means[k] is None else means[k]) for k, ga in enumerate(approxs)]
    M = np.array([B @ m for m in mu])
    C = np.array([ga.covariance_of(B) for ga in approxs])
    return LinCombMoments(M, C, np.asarray(probs, dtype=float) / np.sum(probs))


def lincomb_fast(approxs, probs, B, means=None) -> tuple[list[Marginal], LinCombMoments]:
    """Mixture-of-Gaussians marginals of each row of ``B x`` over the grid."""
    mom = lincomb_moments(approxs, probs, B, means)
    k = mom.means.shape[1]
    idx = np.arange(k)
    conds = []
    for K in range(mom.means.shape[0]):
        sd = np.sqrt(np.maximum(np.diagonal(mom.covs[K]), 0.0))
        conds.append(ConditionalMarginals("gaussian", idx, mom.means[K], sd, mom.means[K], sd))
    return integrate_all(conds, mom.probs), mom


def mixture_correlation(mom: LinCombMoments) -> np.ndarray:
    """Correlation from the law of total covariance over the grid weights."""
    p = mom.probs
    mean = p @ mom.means
    second = np.einsum("k,kij->ij", p, mom.covs) + np.einsum("k,ki,kj->ij", p, mom.means, mom.means)
    cov = second - np.outer(mean, mean)
    sd = np.sqrt(np.maximum(np.diag(cov), 1e-300))
    R = cov / np.outer(sd, sd)
    np.fill_diagonal(R, 1.0)
    return R


def lincomb_correlation(approxs, probs, B, means=None) -> np.ndarray:
    """Posterior correlation matrix of ``v = B x``."""
    return mixture_correlation(lincomb_moments(approxs, probs, B, means))
