"""Tabulated marginals, conditional latent marginals and mixture integration over the grid."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.special import ndtr

__all__ = [
    "STRATEGIES",
    "N_ABSCISSAS",
    "EmptyGrid",
    "Marginal",
    "ConditionalMarginals",
    "ConditionalMarginal",
    "conditional_marginals",
    "conditional_marginal",
    "integrate_marginal",
    "integrate_all",
    "total_variation",
    "skew_normal_params",
]

STRATEGIES = ("gaussian", "simplified_laplace", "laplace")
N_ABSCISSAS = 161
SPAN_SD = 5.0
QUANTILES = (0.025, 0.5, 0.975)
MAX_SKEWNESS = 0.99
LAPLACE_OFFSETS = np.array([-2.0, -1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5, 2.0])

_B = math.sqrt(2.0 / math.pi)
_SQRT_2PI = math.sqrt(2.0 * math.pi)


class EmptyGrid(ValueError):
    pass


def _trapz(y, x, axis=-1):
    return np.trapezoid(y, x, axis=axis)


@dataclass(frozen=True, eq=False)
class Marginal:
    """Tabulated univariate density with moments and quantiles.

    The density is treated as piecewise linear between abscissas; the CDF is
    its exact integral, so quantiles come from a monotone inversion.
    """

    x: np.ndarray
    density: np.ndarray
    mean: float
    sd: float
    quantiles: dict

    @classmethod
    def from_density(cls, x, density) -> "Marginal":
        x = np.asarray(x, dtype=float)
        d = np.maximum(np.asarray(density, dtype=float), 0.0)
        if x.ndim != 1 or x.size < 2 or np.any(np.diff(x) <= 0):
            raise ValueError("abscissas must be strictly increasing")
        total = _trapz(d, x)
        if not total > 0 or not np.isfinite(total):
            raise ValueError("density does not integrate to a positive finite value")
        d = d / total
        mean = float(_trapz(x * d, x))
        var = float(_trapz((x - mean) ** 2 * d, x))
        m = cls(x, d, mean, math.sqrt(max(var, 0.0)), {})
        object.__setattr__(m, "quantiles", {p: m.quantile(p) for p in QUANTILES})
        return m

    def cdf_nodes(self) -> np.ndarray:
        inc = 0.5 * (self.density[1:] + self.density[:-1]) * np.diff(self.x)
        return np.r_[0.0, np.cumsum(inc)]

    def quantile(self, p: float) -> float:
        """Inverse of the exact CDF of the piecewise-linear density."""
        F = self.cdf_nodes()
        p = min(max(p, 0.0), 1.0) * F[-1]
        k = int(np.clip(np.searchsorted(F, p, side="right") - 1, 0, self.x.size - 2))
        h = self.x[k + 1] - self.x[k]
        d0, d1 = self.density[k], self.density[k + 1]
        target = p - F[k]
        slope = (d1 - d0) / h
        if abs(slope) * h < 1e-14 * max(d0, 1e-300):
            t = target / d0 if d0 > 0 else 0.0
        else:
            # d0 t + slope t^2 / 2 = target
            disc = max(d0 * d0 + 2.0 * slope * target, 0.0)
            t = 2.0 * target / (d0 + math.sqrt(disc)) if d0 + math.sqrt(disc) > 0 else 0.0
        return float(self.x[k] + min(max(t, 0.0), h))

    def pdf(self, t) -> np.ndarray:
        return np.interp(t, self.x, self.density, left=0.0, right=0.0)

    def integral(self) -> float:
        return float(_trapz(self.density, self.x))

    def transform(self, fn, jacobian, n: int | None = None) -> "Marginal":
        """Density of ``fn(X)`` for a smooth increasing ``fn`` with derivative ``jacobian``."""
        y = fn(self.x)
        order = np.argsort(y)
        y, dens = y[order], (self.density / jacobian(self.x))[order]
        keep = np.r_[True, np.diff(y) > 0]
        return Marginal.from_density(y[keep], dens[keep])

    def to_rows(self):
        return np.column_stack([self.x, self.density])


def total_variation(p: Marginal, q: Marginal, n: int = 4001) -> float:
    lo = min(p.x[0], q.x[0])
    hi = max(p.x[-1], q.x[-1])
    t = np.linspace(lo, hi, n)
    return 0.5 * float(_trapz(np.abs(p.pdf(t) - q.pdf(t)), t))


def skew_normal_params(mean, sd, skew):
    """Skew-normal ``(xi, omega, alpha)`` with the given mean, sd and (clipped) skewness."""
    mean, sd, skew = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (mean, sd, skew)))
    g = np.clip(skew, -MAX_SKEWNESS, MAX_SKEWNESS)
    c = (np.abs(g) / ((4.0 - math.pi) / 2.0)) ** (2.0 / 3.0)
    bd = np.sign(g) * np.sqrt(c / (1.0 + c))        # b * delta
    delta = bd / _B
    alpha = delta / np.sqrt(1.0 - delta**2)
    omega = sd / np.sqrt(1.0 - bd**2)
    xi = mean - omega * bd
    return xi, omega, alpha


@dataclass(frozen=True, eq=False)
class ConditionalMarginals:
    """Conditional marginals of selected latent elements at one hyperparameter value.

    ``mu``/``sigma`` are the Gaussian-approximation mean and sd; ``mean``/``sd``
    the moments of the strategy's density.
    """

    strategy: str
    index: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    mean: np.ndarray
    sd: np.ndarray
    sn: tuple | None = None          # (xi, omega, alpha) for the simplified Laplace fit
    splines: list | None = None      # log-density corrections for the Laplace strategy
    gamma: tuple | None = None       # (gamma1, gamma3) in standardized units

    def __len__(self):
        return self.index.size

    def pdf(self, t, rows=None) -> np.ndarray:
        """Densities at ``t``; ``t`` has shape (len(rows), k) or broadcasts against it."""
        rows = np.arange(self.index.size) if rows is None else np.asarray(rows)
        t = np.asarray(t, dtype=float)
        if self.strategy == "gaussian" or (self.strategy == "simplified_laplace" and self.sn is None):
            mu, s = self.mu[rows][:, None], self.sigma[rows][:, None]
            u = (t - mu) / s
            return np.exp(-0.5 * u * u) / (_SQRT_2PI * s)
        if self.strategy == "simplified_laplace":
            xi, om, al = (a[rows][:, None] for a in self.sn)
            u = (t - xi) / om
            return 2.0 / om * np.exp(-0.5 * u * u) / _SQRT_2PI * ndtr(al * u)
        out = np.empty(np.broadcast_shapes(t.shape, (rows.size, 1)))
        tt = np.broadcast_to(t, out.shape)
        for r_out, r in enumerate(rows):
            out[r_out] = _laplace_pdf(self.splines[r], self.mu[r], self.sigma[r], tt[r_out])
        return out

    def element(self, k: int) -> "ConditionalMarginal":
        return ConditionalMarginal(self, k)

    def tabulate(self, k: int, n: int = N_ABSCISSAS) -> Marginal:
        x = np.linspace(self.mean[k] - SPAN_SD * self.sd[k], self.mean[k] + SPAN_SD * self.sd[k], n)
        return Marginal.from_density(x, self.pdf(x[None, :], [k])[0])


@dataclass(frozen=True, eq=False)
class ConditionalMarginal:
    """View of one element of a :class:`ConditionalMarginals`."""

    parent: ConditionalMarginals
    k: int

    @property
    def strategy(self):
        return self.parent.strategy

    @property
    def mean(self) -> float:
        return float(self.parent.mean[self.k])

    @property
    def sd(self) -> float:
        return float(self.parent.sd[self.k])

    @property
    def skewness_params(self):
        if self.parent.gamma is None:
            return (0.0, 0.0)
        return tuple(float(g[self.k]) for g in self.parent.gamma)

    def pdf(self, t):
        return self.parent.pdf(np.atleast_1d(t)[None, :], [self.k])[0]

    def tabulate(self, n: int = N_ABSCISSAS) -> Marginal:
        return self.parent.tabulate(self.k, n)


# --------------------------------------------------------------------------
# Laplace strategy helpers


@dataclass(frozen=True)
class _LaplaceCorrection:
    spline: CubicSpline
    lo: float
    hi: float
    slope_lo: float
    slope_hi: float
    log_norm: float


def _correction(c: _LaplaceCorrection, u):
    u = np.asarray(u, dtype=float)
    inner = c.spline(np.clip(u, c.lo, c.hi))
    return np.where(u < c.lo, c.spline(c.lo) + c.slope_lo * (u - c.lo),
                    np.where(u > c.hi, c.spline(c.hi) + c.slope_hi * (u - c.hi), inner))


def _laplace_pdf(c: _LaplaceCorrection, mu, sigma, t):
    u = (np.asarray(t, dtype=float) - mu) / sigma
    return np.exp(-0.5 * u * u + _correction(c, u) - c.log_norm) / sigma


def _laplace_correction(u_nodes, logdens) -> tuple[_LaplaceCorrection, float, float]:
    corr = logdens - logdens[np.argmin(np.abs(u_nodes))] + 0.5 * u_nodes**2
    spline = CubicSpline(u_nodes, corr, bc_type="natural")
    lo, hi = float(u_nodes[0]), float(u_nodes[-1])
    c = _LaplaceCorrection(spline, lo, hi, float(spline(lo, 1)), float(spline(hi, 1)), 0.0)
    u = np.linspace(-10.0, 10.0, 2001)
    g = np.exp(-0.5 * u * u + _correction(c, u))
    z = float(_trapz(g, u))
    mean = float(_trapz(u * g, u)) / z
    var = float(_trapz((u - mean) ** 2 * g, u)) / z
    c = _LaplaceCorrection(spline, lo, hi, c.slope_lo, c.slope_hi, math.log(z))
    return c, mean, math.sqrt(var)


# --------------------------------------------------------------------------


def _sla_gammas(ga, idx, sigma):
    """Third-order corrections in standardized units for elements ``idx``."""
    d3 = ga.d3
    active = np.flatnonzero(d3 != 0.0)
    if active.size == 0:
        z = np.zeros(idx.size)
        return z, z
    J = ga.obs_pos[active]
    d3 = d3[active]
    S = ga.covariance_columns(J)[idx]                 # Cov(x_i, x_j), shape (len(idx), |J|)
    var_all = ga.variances()
    var_J = var_all[J]
    T = S / sigma[:, None]
    g1 = 0.5 * ((var_J[None, :] - T * T) * T) @ d3
    g3 = (T**3) @ d3
    return g1, g3


def conditional_marginals(posterior, ga, idx=None, strategy: str = "simplified_laplace") -> ConditionalMarginals:
    """Conditional marginals of latent elements ``idx`` (default: all) given one hyperparameter value."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    idx = np.arange(ga.n) if idx is None else np.atleast_1d(np.asarray(idx, dtype=np.int64))
    mu = ga.x_star[idx].copy()
    sigma = np.sqrt(ga.variances()[idx])
    if np.any(sigma <= 0):
        raise ValueError("non-positive conditional variance; element is fixed by a constraint")
    if strategy == "gaussian":
        return ConditionalMarginals(strategy, idx, mu, sigma, mu.copy(), sigma.copy())
    g1, g3 = _sla_gammas(ga, idx, sigma)
    if strategy == "simplified_laplace":
        if not np.any(g1) and not np.any(g3):
            return ConditionalMarginals(strategy, idx, mu, sigma, mu.copy(), sigma.copy(), None, None, (g1, g3))
        mean = mu + sigma * (g1 + 0.5 * g3)
        sn = skew_normal_params(mean, sigma, g3)
        return ConditionalMarginals(strategy, idx, mu, sigma, mean, sigma.copy(), sn, None, (g1, g3))
    # full Laplace: refit with x_i pinned at 9 abscissas
    splines, means, sds = [], np.empty(idx.size), np.empty(idx.size)
    for r, i in enumerate(idx):
        col = ga.covariance_columns([i])[:, 0]
        logd = np.empty(LAPLACE_OFFSETS.size)
        for k, u in enumerate(LAPLACE_OFFSETS):
            a = mu[r] + u * sigma[r]
            x0 = ga.x_star + col * (a - mu[r]) / sigma[r] ** 2
            fit = posterior.fit(ga.theta, x0=x0, extra=([i], [a]), joint=ga.joint)
            logd[k] = fit.log_evidence
        c, mu_u, sd_u = _laplace_correction(LAPLACE_OFFSETS, logd)
        splines.append(c)
        means[r] = mu[r] + sigma[r] * mu_u
        sds[r] = sigma[r] * sd_u
    return ConditionalMarginals(strategy, idx, mu, sigma, means, sds, None, splines, (g1, g3))


def conditional_marginal(posterior, ga, i: int, strategy: str = "simplified_laplace") -> ConditionalMarginal:
    return conditional_marginals(posterior, ga, [i], strategy).element(0)


def _check_probs(probs):
    probs = np.asarray(probs, dtype=float)
    if probs.size == 0:
        raise EmptyGrid("no grid points to integrate over")
    probs = probs / probs.sum()
    assert abs(probs.sum() - 1.0) < 1e-12
    return probs


def integrate_marginal(conditionals: Sequence[ConditionalMarginal], probs, n: int = N_ABSCISSAS) -> Marginal:
    """Finite mixture of conditional marginals with normalized weights ``probs``."""
    if len(conditionals) == 0:
        raise EmptyGrid("no grid points to integrate over")
    probs = _check_probs(probs)
    means = np.array([c.mean for c in conditionals])
    sds = np.array([c.sd for c in conditionals])
    mean = float(probs @ means)
    sd = math.sqrt(max(float(probs @ (sds**2 + means**2)) - mean**2, 0.0))
    x = np.linspace(mean - SPAN_SD * sd, mean + SPAN_SD * sd, n)
    dens = sum(p * c.pdf(x) for p, c in zip(probs, conditionals))
    return Marginal.from_density(x, dens)


def integrate_all(conds: Sequence[ConditionalMarginals], probs, n: int = N_ABSCISSAS) -> list[Marginal]:
    """Vectorized :func:`integrate_marginal` for every element shared by ``conds``."""
    if len(conds) == 0:
        raise EmptyGrid("no grid points to integrate over")
    probs = _check_probs(probs)
    means = np.array([c.mean for c in conds])          # (K, n_el)
    sds = np.array([c.sd for c in conds])
    mean = probs @ means
    sd = np.sqrt(np.maximum(probs @ (sds**2 + means**2) - mean**2, 0.0))
    sd = np.where(sd > 0, sd, np.max(sds, axis=0))
    u = np.linspace(-SPAN_SD, SPAN_SD, n)
    X = mean[:, None] + sd[:, None] * u[None, :]
    D = np.zeros_like(X)
    for p, c in zip(probs, conds):
        if p > 0:
            D += p * c.pdf(X)
    return [Marginal.from_density(X[k], D[k]) for k in range(X.shape[0])]
