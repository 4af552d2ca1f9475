"""Observation likelihoods, response binding and the A-matrix observation map."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .hyperparams import HyperParam, Prior, Transform
from .sparse import DimensionMismatch

__all__ = [
    "FAMILIES",
    "DomainError",
    "MultipleResponsesInRow",
    "ColumnFamilyMismatch",
    "Likelihood",
    "Binding",
    "loglik",
    "derivatives",
    "bind_responses",
    "apply_A",
]

FAMILIES = ("gaussian", "poisson", "binomial")
DEFAULT_OBS_PREC_PRIOR = Prior("loggamma", (1.0, 5e-5))
A_DENSITY_WARNING = 0.2

_LOG_2PI = math.log(2.0 * math.pi)


class DomainError(ValueError):
    pass


class MultipleResponsesInRow(ValueError):
    pass


class ColumnFamilyMismatch(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Likelihood:
    """One likelihood block; it owns the non-missing rows of one response column."""

    family: str
    name: str = ""
    hyper: Mapping[str, Mapping] = field(default_factory=dict)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}")
        if not self.name:
            object.__setattr__(self, "name", self.family)

    def hyper_params(self) -> list[HyperParam]:
        if self.family != "gaussian":
            return []
        over = dict(self.hyper.get("prec", {}))
        prior = DEFAULT_OBS_PREC_PRIOR
        if "prior" in over:
            prior = Prior(over["prior"], tuple(float(v) for v in over.get("param", ())))
        return [HyperParam(f"{self.name}.prec", Transform("log"), prior,
                           float(over.get("initial", 0.0)), bool(over.get("fixed", False)))]


def loglik(family: str, y, eta, ntrials=None, prec: float | None = None) -> np.ndarray:
    """Per-observation log density of ``y`` given the linear predictor ``eta``."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian":
        if prec is None or not prec > 0:
            raise DomainError("gaussian likelihood needs a positive precision")
        return 0.5 * (math.log(prec) - _LOG_2PI) - 0.5 * prec * (y - eta) ** 2
    if family == "poisson":
        return y * eta - np.exp(eta) - gammaln(y + 1.0)
    if family == "binomial":
        n = np.ones_like(y) if ntrials is None else np.asarray(ntrials, dtype=float)
        if np.any(y > n) or np.any(y < 0):
            raise DomainError("binomial response outside 0..ntrials")
        lognorm = gammaln(n + 1.0) - gammaln(y + 1.0) - gammaln(n - y + 1.0)
        return lognorm + y * eta - n * np.logaddexp(0.0, eta)
    raise ValueError(f"unknown family {family!r}")


def derivatives(family: str, y, eta, ntrials=None, prec: float | None = None):
    """First three derivatives of :func:`loglik` with respect to ``eta``."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if family == "gaussian":
        d1 = prec * (y - eta)
        d2 = np.full_like(eta, -prec)
        return d1, d2, np.zeros_like(eta)
    if family == "poisson":
        mu = np.exp(eta)
        return y - mu, -mu, -mu
    if family == "binomial":
        n = np.ones_like(y) if ntrials is None else np.asarray(ntrials, dtype=float)
        p = 0.5 * (1.0 + np.tanh(0.5 * eta))
        v = p * (1.0 - p)
        return y - n * p, -n * v, -n * v * (1.0 - 2.0 * p)
    raise ValueError(f"unknown family {family!r}")


@dataclass(frozen=True)
class Binding:
    """Row-to-block assignment; ``block == -1`` marks an unobserved row."""

    block: np.ndarray
    y: np.ndarray
    ntrials: np.ndarray

    @property
    def observed(self) -> np.ndarray:
        return np.flatnonzero(self.block >= 0)


def _check_values(family, y, ntrials, column):
    if family == "gaussian":
        return
    if np.any(y < 0) or np.any(y != np.round(y)):
        raise DomainError(f"column {column + 1}: {family} responses must be non-negative integers")
    if family == "binomial":
        if np.any(ntrials < 1) or np.any(ntrials != np.round(ntrials)):
            raise DomainError(f"column {column + 1}: ntrials must be positive integers")
        if np.any(y > ntrials):
            raise DomainError(f"column {column + 1}: binomial response exceeds ntrials")


def bind_responses(Y, blocks, ntrials=None) -> Binding:
    """Assign every row of the response matrix to the block owning its column.

    ``Y`` is an ``(n, K)`` array with NaN for missing entries; column ``k`` belongs
    to ``blocks[k]``. ``ntrials`` (binomial only) defaults to 1 where missing.
    """
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    n, K = Y.shape
    if K != len(blocks):
        raise ColumnFamilyMismatch(f"{K} response columns but {len(blocks)} likelihood blocks")
    present = ~np.isnan(Y)
    counts = present.sum(axis=1)
    bad = np.flatnonzero(counts > 1)
    if bad.size:
        raise MultipleResponsesInRow(f"row {bad[0] + 1} has {counts[bad[0]]} non-missing responses")
    block = np.where(counts == 1, np.argmax(present, axis=1), -1)
    y = np.where(counts == 1, np.nansum(np.where(present, Y, 0.0), axis=1), np.nan)
    nt = np.ones(n) if ntrials is None else np.where(np.isnan(np.asarray(ntrials, float)), 1.0, ntrials)
    for k, blk in enumerate(blocks):
        rows = block == k
        _check_values(blk.family, y[rows], nt[rows], k)
    return Binding(block.astype(np.int64), y, nt.astype(float))


def apply_A(A, eta) -> np.ndarray:
    """``eta* = A @ eta``; warns when ``A`` is not sparse in practice."""
    A = sp.csr_matrix(A)
    eta = np.asarray(eta, dtype=float)
    if A.shape[1] != eta.shape[0]:
        raise DimensionMismatch(f"A has {A.shape[1]} columns but eta has length {eta.shape[0]}")
    check_A_density(A)
    return A @ eta


def check_A_density(A) -> float:
    density = A.nnz / max(1, A.shape[0] * A.shape[1])
    if density > A_DENSITY_WARNING:
        warnings.warn(f"A matrix is {100 * density:.0f}% dense; the latent field loses its sparsity",
                      stacklevel=3)
    return density
