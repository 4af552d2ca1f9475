"""Simulated data sets for the worked example models, with fixed seeds."""

from __future__ import annotations

import math

import numpy as np
import scipy.sparse as sp

from .latent import CopyLink, LatentComponent
from .likelihoods import Likelihood
from .model import Effect, FixedEffect, LinComb, ModelSpec

__all__ = ["two_likelihoods", "ar1_replicates", "ar1_lincombs", "varying_slope", "simulate_ar1"]

PC_LIKE = {"prior": "loggamma", "param": (1.0, 0.2161)}


def simulate_ar1(rng: np.random.Generator, n: int, phi: float, kappa: float) -> np.ndarray:
    """Stationary AR(1) path with innovation precision ``kappa``."""
    x = np.empty(n)
    x[0] = rng.normal(0.0, 1.0 / math.sqrt(kappa * (1.0 - phi * phi)))
    eps = rng.normal(0.0, 1.0 / math.sqrt(kappa), size=n - 1)
    for i in range(1, n):
        x[i] = phi * x[i - 1] + eps[i - 1]
    return x


def two_likelihoods(seed: int = 1, n: int = 100):
    """Binomial rows then Poisson rows sharing an intercept and a covariate effect."""
    rng = np.random.default_rng(seed)
    x1 = rng.uniform(size=n)
    eta1 = 1.0 + x1
    y1 = rng.binomial(1, 1.0 / (1.0 + np.exp(-eta1)))
    x2 = rng.uniform(size=n)
    y2 = rng.poisson(np.exp(1.0 + x2))
    Y = np.full((2 * n, 2), np.nan)
    Y[:n, 0] = y1
    Y[n:, 1] = y2
    ntrials = np.r_[np.ones(n), np.full(n, np.nan)]
    spec = ModelSpec(
        likelihoods=(Likelihood("binomial"), Likelihood("poisson")),
        responses=Y,
        fixed_effects=(FixedEffect("intercept"), FixedEffect("xx", np.r_[x1, x2])),
        ntrials=ntrials,
    )
    return spec, {"intercept": 1.0, "xx": 1.0}


def ar1_replicates(seed: int = 2, n: int = 100, phi: float = 0.5, kappa: float = math.sqrt(2.0),
                   tau_obs: float = 3.0, lincombs: tuple = ()):
    """Two AR(1) replicates: Poisson counts on the first, Gaussian data on the second."""
    rng = np.random.default_rng(seed)
    z1 = simulate_ar1(rng, n, phi, kappa)
    z2 = simulate_ar1(rng, n, phi, kappa)
    y1 = rng.poisson(np.exp(z1))
    y2 = rng.normal(z2, 1.0 / math.sqrt(tau_obs))
    Y = np.full((2 * n, 2), np.nan)
    Y[:n, 0] = y1
    Y[n:, 1] = y2
    comp = LatentComponent("i", "ar1", n, replicate_count=2,
                           hyper={"prec": PC_LIKE, "rho": {"prior": "gaussian", "param": (0.0, 0.3)}})
    eff = Effect(comp, np.tile(np.arange(n), 2), replicate=np.repeat([0, 1], n))
    spec = ModelSpec(
        likelihoods=(Likelihood("poisson"), Likelihood("gaussian", hyper={"prec": PC_LIKE})),
        responses=Y,
        effects=(eff,),
        lincombs=lincombs,
    )
    truth = {
        "gaussian.prec": tau_obs,
        "i.prec": kappa * (1.0 - phi * phi),
        "i.rho": phi,
        "z": np.r_[z1, z2],
        "prior_sd": 1.0 / math.sqrt(kappa * (1.0 - phi * phi)),
    }
    return spec, truth


def ar1_lincombs(seed: int = 2, n: int = 100):
    """The AR(1) replicate model with ``v1 = 3 z[1,2] - 5 z[1,4]`` and ``v2 = z[1,3] + 2 z[1,5]``."""
    lcs = (LinComb("lc1", (("i", 1, 3.0), ("i", 3, -5.0))),
           LinComb("lc2", (("i", 2, 1.0), ("i", 4, 2.0))))
    return ar1_replicates(seed, n, lincombs=lcs)


def varying_slope(seed: int = 3, n: int = 1000, variant: str = "copy", tau: float = 1.0, rho: float = 0.8):
    """Gaussian data with ``eta_i = a_i + b_i z_i`` and correlated ``(a_i, b_i)``.

    ``variant="copy"`` ties ``b`` into the predictor through a copy of the
    bivariate field; ``variant="A"`` builds ``eta* = [I, I] eta`` instead.
    """
    rng = np.random.default_rng(seed)
    Sigma = np.array([[1.0, rho], [rho, 1.0]])
    z = rng.normal(size=n)
    ab = rng.multivariate_normal(np.zeros(2), Sigma, size=n)
    y = ab[:, 0] + ab[:, 1] * z + rng.normal(0.0, 1.0 / math.sqrt(tau), size=n)
    lik = (Likelihood("gaussian", hyper={"prec": PC_LIKE}),)
    comp = LatentComponent("i", "iid2d", 2 * n)
    if variant == "copy":
        effects = (Effect(comp, np.arange(n)), Effect(CopyLink("j", "i"), np.arange(n) + n, weights=z))
        spec = ModelSpec(lik, y[:, None], effects=effects)
    elif variant == "A":
        effects = (Effect(comp, np.arange(2 * n), weights=np.r_[np.ones(n), z]),)
        A = sp.hstack([sp.eye(n), sp.eye(n)]).tocsr()
        Y = y[:, None]
        spec = ModelSpec(lik, Y, effects=effects, A=A)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    truth = {"gaussian.prec": tau, "i.prec1": 1.0, "i.prec2": 1.0, "i.cor": rho, "a": ab[:, 0], "b": ab[:, 1]}
    return spec, truth
