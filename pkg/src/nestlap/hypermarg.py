"""Posterior marginals of the hyperparameters from exploration output."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from .explore import Batch, PointBudgetExceeded, ThetaGrid, ZMap
from .marginals import N_ABSCISSAS, Marginal

__all__ = [
    "DegenerateAxis",
    "DimensionCapExceeded",
    "NonFiniteEvaluation",
    "DirectionalScales",
    "fit_scales",
    "asym_gaussian_marginal",
    "integration_free_marginal",
    "integration_free_marginals",
    "refined_grid_marginals",
    "two_piece_marginal",
]

TARGET_DROP = 2.0
LATTICE_HALF_WIDTH = 6.0
LATTICE_NODES = 25
MAX_LATTICE_DIM = 5
PROBE_HALVINGS = 5
PROBE_DROP = 0.5
REFINED_STEP = 0.5
REFINED_DROP = 7.0


class DegenerateAxis(ValueError):
    pass


class DimensionCapExceeded(ValueError):
    pass


class NonFiniteEvaluation(RuntimeError):
    pass


@dataclass(frozen=True)
class DirectionalScales:
    """Per-axis scales in z units on the positive and negative side of the mode."""

    plus: np.ndarray
    minus: np.ndarray


def _side_scale(dist: np.ndarray, drop: np.ndarray, target_drop: float = TARGET_DROP) -> float:
    """Scale s whose Gaussian drop ``target_drop`` occurs at the same distance as observed.

    Uses points on one side of the mode. The drop is interpolated on the
    ``sqrt(2 * drop)`` scale, which is linear in the distance for a Gaussian, so
    Gaussian targets are recovered exactly.
    """
    order = np.argsort(dist)
    d = np.r_[0.0, dist[order]]
    r = np.r_[0.0, np.sqrt(2.0 * np.maximum(drop[order], 0.0))]
    target = math.sqrt(2.0 * target_drop)
    above = np.flatnonzero(r >= target)
    if above.size and above[0] > 0:
        k = above[0]
    else:
        # unbracketed: extrapolate from the outermost pair with distinct values
        k = d.size - 1
        while k > 0 and r[k] <= r[k - 1]:
            k -= 1
        if k == 0:
            raise DegenerateAxis("log density does not drop along this axis")
    d0, d1, r0, r1 = d[k - 1], d[k], r[k - 1], r[k]
    if r1 <= r0:
        raise DegenerateAxis("log density does not drop along this axis")
    dist = d0 + (target - r0) * (d1 - d0) / (r1 - r0)
    return dist / target


def fit_scales(grid: ThetaGrid) -> DirectionalScales:
    """Directional scales from the evaluated points on each z axis."""
    plus = np.empty(grid.m)
    minus = np.empty(grid.m)
    for j in range(grid.m):
        z, drop = grid.axis_profile(j)
        finite = np.isfinite(drop)
        z, drop = z[finite], drop[finite]
        pos, neg = z > 0, z < 0
        if not pos.any() or not neg.any():
            raise DegenerateAxis(f"axis {j}: no evaluations on both sides of the mode")
        plus[j] = _side_scale(z[pos], drop[pos])
        minus[j] = _side_scale(-z[neg], drop[neg])
    return DirectionalScales(plus, minus)


def _log_two_piece(z, plus, minus):
    s = np.where(z >= 0, plus, minus)
    return -0.5 * (z / s) ** 2


def asym_gaussian_marginal(grid: ThetaGrid | ZMap, scales: DirectionalScales, j: int, *,
                           nodes: int = LATTICE_NODES, half_width: float = LATTICE_HALF_WIDTH,
                           n: int = N_ABSCISSAS, max_dim: int = MAX_LATTICE_DIM) -> Marginal:
    """Marginal of ``theta_j`` under the product of two-piece Gaussians in z.

    The other z coordinates are summed over a regular lattice; the coordinate
    with the largest loading on ``theta_j`` is solved for exactly at each abscissa.
    """
    zmap = grid.zmap if isinstance(grid, ThetaGrid) else grid
    m = zmap.m
    if m > max_dim:
        raise DimensionCapExceeded(f"lattice integration limited to {max_dim} dimensions (m={m})")
    c = zmap.V[j] * np.sqrt(zmap.lam)          # theta_j = mode_j + c @ z
    k_star = int(np.argmax(np.abs(c)))
    others = [k for k in range(m) if k != k_star]
    spread_lo = math.sqrt(np.sum((c * np.where(c > 0, scales.minus, scales.plus)) ** 2))
    spread_hi = math.sqrt(np.sum((c * np.where(c > 0, scales.plus, scales.minus)) ** 2))
    t = np.r_[np.linspace(-half_width * spread_lo, 0.0, n // 2 + 1)[:-1],
              np.linspace(0.0, half_width * spread_hi, n - n // 2)]
    node = np.linspace(-half_width, half_width, nodes)
    dens = np.zeros(n)
    if others:
        grids = np.meshgrid(*([node] * len(others)), indexing="ij")
        Zo = np.column_stack([g.ravel() for g in grids])          # (L, m-1)
        logw = np.zeros(Zo.shape[0])
        for col, k in enumerate(others):
            logw += _log_two_piece(Zo[:, col], scales.plus[k], scales.minus[k])
        shift = Zo @ c[others]
        keep = logw > logw.max() - 40.0
        Zo_w, shift = np.exp(logw[keep]), shift[keep]
        for start in range(0, shift.size, 4096):
            sl = slice(start, start + 4096)
            zk = (t[None, :] - shift[sl, None]) / c[k_star]
            dens += Zo_w[sl] @ np.exp(_log_two_piece(zk, scales.plus[k_star], scales.minus[k_star]))
    else:
        zk = t / c[k_star]
        dens = np.exp(_log_two_piece(zk, scales.plus[k_star], scales.minus[k_star]))
    return Marginal.from_density(zmap.mode[j] + t, dens)


def two_piece_marginal(center: float, sd_minus: float, sd_plus: float, n: int = N_ABSCISSAS,
                       half_width: float = LATTICE_HALF_WIDTH) -> Marginal:
    """Two-piece Gaussian glued continuously at ``center`` and renormalized."""
    u = np.linspace(-half_width, half_width, n)
    x = center + np.where(u < 0, u * sd_minus, u * sd_plus)
    return Marginal.from_density(x, np.exp(-0.5 * u * u))


def _direction_sd(f, theta0, direction, h, f0):
    """sd along ``direction`` from the mode and probes at ``h`` and ``2h``.

    The sd is the distance at which the log density has dropped by 1/2, read off
    the ``sqrt(2 * drop)`` profile through the three points.
    """
    for _ in range(PROBE_HALVINGS + 1):
        f1 = f(theta0 + h * direction)
        f2 = f(theta0 + 2 * h * direction)
        if np.isfinite(f1) and np.isfinite(f2):
            break
        h *= 0.5
    else:
        raise NonFiniteEvaluation("probe evaluations stayed non-finite after halving")
    try:
        return float(_side_scale(np.array([h, 2 * h]), np.array([f0 - f1, f0 - f2]), PROBE_DROP))
    except DegenerateAxis:
        raise DegenerateAxis("log density does not decrease along the conditional-mean line") from None


def integration_free_marginal(f, zmap: ZMap, mode_value: float, j: int, n: int = N_ABSCISSAS):
    """Two-piece Gaussian marginal of ``theta_j`` from curvature along the conditional-mean line.

    Along ``theta(t) = mode + t * Sigma[:, j] / Sigma[j, j]`` a Gaussian log density
    equals the marginal log density of ``theta_j``; probes at ``t = +-1, +-2``
    marginal sds give the scale on each side. Returns ``(Marginal, sd_minus, sd_plus)``.
    """
    Sigma = zmap.Sigma
    s_jj = math.sqrt(Sigma[j, j])
    direction = Sigma[:, j] / Sigma[j, j]
    sd_plus = _direction_sd(f, zmap.mode, direction, s_jj, mode_value)
    sd_minus = _direction_sd(f, zmap.mode, -direction, s_jj, mode_value)
    return two_piece_marginal(zmap.mode[j], sd_minus, sd_plus, n), sd_minus, sd_plus


def integration_free_marginals(evaluate: Batch, zmap: ZMap, mode_value: float, n: int = N_ABSCISSAS):
    """All hyperparameter marginals; the probes of every axis are evaluated in one batch."""
    m = zmap.m
    Sigma = zmap.Sigma
    cache: dict[tuple, float] = {}

    def f(theta):
        key = tuple(np.round(theta, 14))
        if key not in cache:
            cache[key] = evaluate([theta])[0][0]
        return cache[key]

    # evaluate the nominal probes together, then run the per-axis logic on the cache
    probes = []
    for j in range(m):
        d = Sigma[:, j] / Sigma[j, j]
        h = math.sqrt(Sigma[j, j])
        probes += [zmap.mode + s * k * h * d for s in (1.0, -1.0) for k in (1.0, 2.0)]
    for theta, (val, _) in zip(probes, evaluate(probes)):
        cache[tuple(np.round(theta, 14))] = val
    out = []
    for j in range(m):
        out.append(integration_free_marginal(f, zmap, mode_value, j, n))
    return out


def refined_grid_marginals(evaluate: Batch, zmap: ZMap, mode_value: float, *, step: float = REFINED_STEP,
                           drop: float = REFINED_DROP, budget: int = 20_000, n: int = N_ABSCISSAS):
    """Marginals from a second, finer exploration on a lattice aligned with the theta axes.

    Lattice points are ``mode + step * sqrt(diag(Sigma)) * u`` for integer ``u``;
    each marginal sums the lattice densities over the other axes, then a spline
    in log density interpolates to ``n`` abscissas.
    """
    m = zmap.m
    sd = np.sqrt(np.diag(zmap.Sigma))
    origin = (0,) * m
    vals = {origin: 0.0}
    frontier = [origin]
    count = 1
    while frontier:
        cand = sorted({tuple(p[:j] + (p[j] + s,) + p[j + 1:]) for p in frontier for j in range(m) for s in (-1, 1)}
                      - vals.keys())
        if not cand:
            break
        count += len(cand)
        if count > budget:
            raise PointBudgetExceeded(f"refined grid needs more than {budget} evaluations")
        res = evaluate([zmap.mode + step * sd * np.array(q, dtype=float) for q in cand])
        frontier = []
        for q, (v, _) in zip(cand, res):
            rel = v - mode_value
            vals[q] = rel
            if np.isfinite(rel) and -rel < drop:
                frontier.append(q)
    keys = np.array([k for k, v in vals.items() if np.isfinite(v) and -v < drop])
    logd = np.array([vals[tuple(k)] for k in keys])
    out = []
    for j in range(m):
        levels = np.arange(keys[:, j].min(), keys[:, j].max() + 1)
        mass = np.array([np.sum(np.exp(logd[keys[:, j] == u])) for u in levels])
        ok = mass > 0
        levels, mass = levels[ok], mass[ok]
        x_nodes = zmap.mode[j] + step * sd[j] * levels
        spline = CubicSpline(x_nodes, np.log(mass), bc_type="natural")
        pad = step * sd[j]
        x = np.linspace(x_nodes[0] - pad, x_nodes[-1] + pad, n)
        inside = spline(np.clip(x, x_nodes[0], x_nodes[-1]))
        lo_slope, hi_slope = spline(x_nodes[0], 1), spline(x_nodes[-1], 1)
        logx = np.where(x < x_nodes[0], spline(x_nodes[0]) + max(lo_slope, 0.0) * (x - x_nodes[0]),
                        np.where(x > x_nodes[-1], spline(x_nodes[-1]) + min(hi_slope, 0.0) * (x - x_nodes[-1]),
                                 inside))
        out.append(Marginal.from_density(x, np.exp(logx - logx.max())))
    return out, count - 1
