"""Brute-force reference posteriors for tests.

Everything here is dense and written independently of the sparse machinery:
prior covariances come from closed forms, conditioning uses the covariance
form, and non-Gaussian models are integrated on tensor Simpson lattices.
Only model metadata (names, transforms, priors, indices) is read from the
package.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from nestlap.latent import CopyLink
from nestlap.model import ModelSpec, hyper_vector

LOG_LINK_PREC = 15.0
EDGE_TOL = 1e-6
MAX_DENSE = 500


class NonGaussianBlock(ValueError):
    pass


class UnsupportedModel(ValueError):
    pass


class BudgetExceeded(RuntimeError):
    pass


class NonNormalizable(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# hyperparameters


def to_natural(transform, t: float) -> float:
    name = transform.name
    if name == "log":
        return math.exp(t)
    if name == "fisher":
        return (math.exp(t) - 1.0) / (math.exp(t) + 1.0)
    if name == "identity":
        return t
    if name == "exchangeable":
        g = transform.param
        return (math.exp(t) - 1.0) / (math.exp(t) + g - 1.0)
    raise UnsupportedModel(name)


def log_prior_density(prior, t: float) -> float:
    if prior.kind == "flat":
        return 0.0
    if prior.kind == "gaussian":
        mu, prec = prior.params
        if prec == 0:
            return 0.0
        return 0.5 * math.log(prec) - 0.5 * math.log(2 * math.pi) - 0.5 * prec * (t - mu) ** 2
    a, b = prior.params
    # Gamma(a, rate b) on exp(t), including the Jacobian exp(t)
    return a * math.log(b) - math.lgamma(a) + a * t - b * math.exp(t)


def free_params(spec: ModelSpec):
    return [p for p in hyper_vector(spec).params if not p.fixed]


def natural_values(spec: ModelSpec, theta) -> dict:
    """Natural values of every hyperparameter; ``theta`` holds the free internal values."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    out = {}
    k = 0
    for p in hyper_vector(spec).params:
        if p.fixed:
            out[p.name] = to_natural(p.transform, p.initial)
        else:
            out[p.name] = to_natural(p.transform, float(theta[k]))
            k += 1
    return out


def log_prior_theta(spec: ModelSpec, theta) -> float:
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    return sum(log_prior_density(p.prior, float(t)) for p, t in zip(free_params(spec), theta))


# ---------------------------------------------------------------------------
# dense prior of the effects


def _ar1_cov(n, prec, rho):
    i = np.arange(n)
    return rho ** np.abs(i[:, None] - i[None, :]) / prec


def _base_cov(comp, nat) -> np.ndarray:
    n, name = comp.size, comp.name
    if comp.model == "iid":
        return np.eye(n) / nat[f"{name}.prec"]
    if comp.model == "ar1":
        return _ar1_cov(n, nat[f"{name}.prec"], nat[f"{name}.rho"])
    if comp.model in ("iid2d", "iid3d"):
        d = 2 if comp.model == "iid2d" else 3
        sd = np.array([nat[f"{name}.prec{i}"] for i in range(1, d + 1)]) ** -0.5
        R = np.eye(d)
        if d == 2:
            R[0, 1] = R[1, 0] = nat[f"{name}.cor"]
        else:
            for a, b in ((1, 2), (1, 3), (2, 3)):
                R[a - 1, b - 1] = R[b - 1, a - 1] = nat[f"{name}.cor{a}{b}"]
        return np.kron(R * np.outer(sd, sd), np.eye(n // d))
    if comp.model in ("linear", "intercept"):
        if comp.prec <= 0:
            raise UnsupportedModel(f"{name}: improper prior has no covariance")
        return np.array([[1.0 / comp.prec]])
    raise UnsupportedModel(f"{name}: intrinsic model {comp.model!r}")


def _component_cov(comp, nat) -> np.ndarray:
    S = _base_cov(comp, nat)
    g = comp.group_count
    if g > 1:
        rho = nat[f"{comp.name}.group_rho"]
        if comp.group_model == "exchangeable":
            Rg = (1 - rho) * np.eye(g) + rho
        elif comp.group_model == "ar1":
            Rg = _ar1_cov(g, 1.0, rho)
        else:
            raise UnsupportedModel(f"{comp.name}: intrinsic group model")
        S = np.kron(Rg, S)
    return np.kron(np.eye(comp.replicate_count), S)


def _positions(eff, structure) -> np.ndarray:
    pos = eff.index.copy()
    used = pos >= 0
    r = np.zeros_like(pos) if eff.replicate is None else eff.replicate
    g = np.zeros_like(pos) if eff.group is None else eff.group
    pos[used] = (r[used] * structure.group_count + g[used]) * structure.size + pos[used]
    return pos


@dataclass
class DenseModel:
    """Joint field ``(eta*, eta, effects)`` as ``G u + m`` with independent ``u ~ N(0, D)``."""

    mean: np.ndarray
    cov: np.ndarray
    obs_rows: np.ndarray          # joint index observed by each response row
    eta_offset: int
    effect_slices: dict


def dense_model(spec: ModelSpec, theta, log_link_prec: float = LOG_LINK_PREC) -> DenseModel:
    nat = natural_values(spec, theta)
    kappa = math.exp(log_link_prec)
    effects = spec.all_effects()
    structures, slices = {}, {}
    off = 0
    for eff in effects:
        s = structures[eff.latent.source] if isinstance(eff.latent, CopyLink) else eff.latent
        structures[eff.name] = s
        size = s.expanded_size
        slices[eff.name] = slice(off, off + size)
        off += size
    nc = off
    # c = T b with b = (independent components, copy innovations)
    T = np.zeros((nc, nc))
    Db = np.zeros((nc, nc))
    mc = np.zeros(nc)
    for eff in effects:
        sl = slices[eff.name]
        if isinstance(eff.latent, CopyLink):
            psi = nat.get(f"{eff.name}.beta", 1.0)
            T[sl] = psi * T[slices[eff.latent.source]]
            T[sl, sl] += np.eye(sl.stop - sl.start)
            lt = eff.latent.log_tau_copy
            Db[sl, sl] = np.eye(sl.stop - sl.start) * math.exp(-(log_link_prec if lt is None else lt))
            mc[sl] = psi * mc[slices[eff.latent.source]]
        else:
            T[sl, sl] = np.eye(sl.stop - sl.start)
            Db[sl, sl] = _component_cov(eff.latent, nat)
            mc[sl] = eff.latent.mean
    Sc = T @ Db @ T.T
    n_eta = spec.n_eta
    if nc > MAX_DENSE:
        raise BudgetExceeded(f"dense oracle limited to {MAX_DENSE} effect elements")
    M = np.zeros((n_eta, nc))
    for eff in effects:
        pos = _positions(eff, structures[eff.name])
        w = np.ones(n_eta) if eff.weights is None else eff.weights
        for r in np.flatnonzero(pos >= 0):
            M[r, slices[eff.name].start + pos[r]] += w[r]
    # eta = M c + eps
    S_eta = M @ Sc @ M.T + np.eye(n_eta) / kappa
    blocks_mean = [M @ mc, mc]
    cov = np.block([[S_eta, M @ Sc], [Sc @ M.T, Sc]])
    eta_off = 0
    if spec.A is not None:
        A = spec.A.toarray()
        n_obs = A.shape[0]
        G = np.vstack([np.hstack([A, np.zeros((n_obs, nc))]), np.eye(n_eta + nc)])
        cov = G @ cov @ G.T
        cov[:n_obs, :n_obs] += np.eye(n_obs) / kappa
        blocks_mean = [A @ blocks_mean[0]] + blocks_mean
        eta_off = n_obs
    obs_rows = np.arange(spec.n_obs)     # eta* rows with an A matrix, eta rows otherwise
    return DenseModel(np.concatenate(blocks_mean), cov, obs_rows, eta_off,
                      {k: slice(v.start + eta_off + n_eta, v.stop + eta_off + n_eta) for k, v in slices.items()})


def _gaussian_obs(spec: ModelSpec, nat) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Observed rows, values and noise variances; all blocks must be Gaussian."""
    rows, ys, var = [], [], []
    for k, lik in enumerate(spec.likelihoods):
        if lik.family != "gaussian":
            raise NonGaussianBlock(f"likelihood {lik.name!r} is {lik.family}")
        col = spec.responses[:, k]
        obs = np.flatnonzero(~np.isnan(col))
        rows.append(obs)
        ys.append(col[obs])
        var.append(np.full(obs.size, 1.0 / nat[f"{lik.name}.prec"]))
    return np.concatenate(rows), np.concatenate(ys), np.concatenate(var)


def exact_gaussian_posterior(spec: ModelSpec, theta, log_link_prec: float = LOG_LINK_PREC):
    """Posterior mean and covariance of the joint field given Gaussian data."""
    nat = natural_values(spec, theta)
    rows, y, var = _gaussian_obs(spec, nat)
    dm = dense_model(spec, theta, log_link_prec)
    if rows.size == 0:
        return dm.mean, dm.cov
    H = dm.obs_rows[rows]
    S = dm.cov[np.ix_(H, H)] + np.diag(var)
    K = np.linalg.solve(S, dm.cov[H]).T
    mean = dm.mean + K @ (y - dm.mean[H])
    cov = dm.cov - K @ dm.cov[H]
    return mean, 0.5 * (cov + cov.T)


def exact_log_marginal(spec: ModelSpec, theta, log_link_prec: float = LOG_LINK_PREC) -> float:
    """``log pi(y | theta)`` for a Gaussian model."""
    nat = natural_values(spec, theta)
    rows, y, var = _gaussian_obs(spec, nat)
    dm = dense_model(spec, theta, log_link_prec)
    H = dm.obs_rows[rows]
    S = dm.cov[np.ix_(H, H)] + np.diag(var)
    L = np.linalg.cholesky(S)
    r = np.linalg.solve(L, y - dm.mean[H])
    return float(-0.5 * r @ r - np.sum(np.log(np.diag(L))) - 0.5 * y.size * math.log(2 * math.pi))


def exact_log_posterior(spec: ModelSpec, theta, log_link_prec: float = LOG_LINK_PREC) -> float:
    """Unnormalized ``log pi(theta | y)`` for a Gaussian model."""
    return exact_log_marginal(spec, theta, log_link_prec) + log_prior_theta(spec, theta)


# ---------------------------------------------------------------------------
# quadrature


def simpson_weights(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    if n < 3 or n % 2 == 0:
        raise ValueError("Simpson rule needs an odd node count >= 3")
    x = np.linspace(a, b, n)
    w = np.ones(n)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return x, w * (b - a) / (n - 1) / 3.0


@dataclass(frozen=True)
class QuadratureSpec:
    """Lattice ranges and odd node counts; ``x_*`` cover the effects (non-Gaussian case)."""

    theta_ranges: tuple
    theta_nodes: tuple
    x_ranges: tuple = ()
    x_nodes: tuple = ()
    max_nodes: int = 10**7

    def __post_init__(self):
        for n in tuple(self.theta_nodes) + tuple(self.x_nodes):
            if n < 21:
                raise ValueError("at least 21 nodes per dimension")
        if len(self.theta_ranges) != len(self.theta_nodes) or len(self.x_ranges) != len(self.x_nodes):
            raise ValueError("ranges and node counts differ in length")

    def doubled(self) -> "QuadratureSpec":
        return QuadratureSpec(self.theta_ranges, tuple(2 * n - 1 for n in self.theta_nodes), self.x_ranges,
                              tuple(2 * n - 1 for n in self.x_nodes), self.max_nodes)


@dataclass
class QuadratureResult:
    theta_nodes: list          # per free hyperparameter, internal scale
    theta_density: list
    x_nodes: list              # per effect element (non-Gaussian case) or None
    x_density: list
    gaussian_mixture: tuple | None = None   # (weights, means, sds) over the theta lattice


def _check_edges(name, dens):
    peak = dens.max()
    if not peak > 0 or dens[0] > EDGE_TOL * peak or dens[-1] > EDGE_TOL * peak:
        raise NonNormalizable(f"{name}: mass at the lattice edge; the posterior is not normalizable on this range")


def _loglik(family, y, eta, ntrials, prec):
    if family == "poisson":
        return y * eta - np.exp(eta) - gammaln(y + 1.0)
    if family == "binomial":
        return (y * eta - ntrials * np.logaddexp(0.0, eta)
                + gammaln(ntrials + 1.0) - gammaln(y + 1.0) - gammaln(ntrials - y + 1.0))
    if family == "gaussian":
        return 0.5 * math.log(prec / (2 * math.pi)) - 0.5 * prec * (y - eta) ** 2
    raise UnsupportedModel(family)


def _theta_lattice(spec: ModelSpec, q: QuadratureSpec):
    m = len(free_params(spec))
    if m > 2 or m != len(q.theta_nodes):
        raise UnsupportedModel("quadrature oracle handles m <= 2 with one range per hyperparameter")
    axes = [simpson_weights(lo, hi, n) for (lo, hi), n in zip(q.theta_ranges, q.theta_nodes)]
    grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
    pts = np.column_stack([g.ravel() for g in grids]) if m else np.zeros((1, 0))
    w = np.prod(np.column_stack([g.ravel() for g in wgrids]), axis=1) if m else np.ones(1)
    return axes, pts, w


def _theta_marginals(axes, logpost, w, shape):
    P = np.exp(logpost - logpost.max()) * w
    P = P.reshape(shape)
    nodes, dens = [], []
    for j, (x, wj) in enumerate(axes):
        other = tuple(k for k in range(len(axes)) if k != j)
        mass = P.sum(axis=other) if other else P
        d = mass / wj
        d = d / np.sum(d * wj)
        _check_edges(f"theta[{j}]", d)
        nodes.append(x)
        dens.append(d)
    return nodes, dens


def quadrature_posterior(spec: ModelSpec, q: QuadratureSpec, log_link_prec: float = LOG_LINK_PREC):
    """Marginals of the free hyperparameters and of the effects by nested dense quadrature.

    Gaussian models integrate the latent field exactly at each lattice point and
    return the latent marginals as a Gaussian mixture over the lattice. Otherwise
    the effects (at most 3 elements, no A matrix or copies) are integrated on a
    tensor Simpson lattice with ``eta = M c``, the limit of an infinitely precise
    predictor link.
    """
    axes, pts, w = _theta_lattice(spec, q)
    shape = tuple(len(a[0]) for a in axes)
    gaussian = all(lk.family == "gaussian" for lk in spec.likelihoods)
    if gaussian:
        if len(pts) > q.max_nodes:
            raise BudgetExceeded(f"{len(pts)} lattice points exceed {q.max_nodes}")
        logpost = np.array([exact_log_posterior(spec, t, log_link_prec) for t in pts])
        nodes, dens = _theta_marginals(axes, logpost, w, shape) if axes else ([], [])
        p = np.exp(logpost - logpost.max()) * w
        p /= p.sum()
        moments = [exact_gaussian_posterior(spec, t, log_link_prec) for t in pts]
        means = np.array([mu for mu, _ in moments])
        sds = np.array([np.sqrt(np.diag(C)) for _, C in moments])
        return QuadratureResult(nodes, dens, None, None, (p, means, sds))

    if spec.A is not None or any(isinstance(e.latent, CopyLink) for e in spec.effects):
        raise UnsupportedModel("non-Gaussian quadrature excludes A matrices and copies")
    dm0 = dense_model(spec, pts[0], log_link_prec)
    nc = sum(s.stop - s.start for s in dm0.effect_slices.values())
    if nc > 3 or len(q.x_nodes) != nc:
        raise UnsupportedModel("non-Gaussian quadrature integrates at most 3 latent elements, one range each")
    total = len(pts) * int(np.prod(q.x_nodes))
    if total > q.max_nodes:
        raise BudgetExceeded(f"{total} nodes exceed {q.max_nodes}")
    xaxes = [simpson_weights(lo, hi, n) for (lo, hi), n in zip(q.x_ranges, q.x_nodes)]
    X = np.column_stack([g.ravel() for g in np.meshgrid(*[a[0] for a in xaxes], indexing="ij")])
    Wx = np.prod(np.column_stack([g.ravel() for g in np.meshgrid(*[a[1] for a in xaxes], indexing="ij")]), axis=1)
    M = _design(spec)
    eta = X @ M.T
    logpost = np.empty(len(pts))
    joint_x = np.zeros(X.shape[0])
    cache_ll = {}
    per_theta = []
    for k, t in enumerate(pts):
        nat = natural_values(spec, t)
        dm = dense_model(spec, t, log_link_prec)
        c_sl = slice(dm.eta_offset + spec.n_eta, dm.cov.shape[0])
        Sc, mc = dm.cov[c_sl, c_sl], dm.mean[c_sl]
        L = np.linalg.cholesky(Sc)
        Z = np.linalg.solve(L, (X - mc).T)
        lp = -0.5 * np.sum(Z * Z, axis=0) - np.sum(np.log(np.diag(L))) - 0.5 * nc * math.log(2 * math.pi)
        ll = np.zeros(X.shape[0])
        for j, lik in enumerate(spec.likelihoods):
            col = spec.responses[:, j]
            obs = np.flatnonzero(~np.isnan(col))
            if obs.size == 0:
                continue
            prec = nat.get(f"{lik.name}.prec")
            key = (j, prec)
            if key not in cache_ll:
                nt = np.ones(obs.size) if spec.ntrials is None else np.nan_to_num(spec.ntrials[obs], nan=1.0)
                cache_ll[key] = _loglik(lik.family, col[obs][None, :], eta[:, obs], nt[None, :], prec).sum(axis=1)
            ll += cache_ll[key]
        logj = lp + ll + log_prior_theta(spec, t)
        top = logj.max()
        logpost[k] = top + math.log(np.sum(np.exp(logj - top) * Wx))
        per_theta.append((top, np.exp(logj - top)))
    nodes, dens = _theta_marginals(axes, logpost, w, shape) if axes else ([], [])
    top = logpost.max()
    for k, (tk, jx) in enumerate(per_theta):
        joint_x += w[k] * math.exp(tk - top) * jx
    J = joint_x.reshape(tuple(q.x_nodes))
    x_nodes, x_dens = [], []
    for j, (x, wj) in enumerate(xaxes):
        Wo = np.ones_like(J)
        for k2, (_, wk) in enumerate(xaxes):
            if k2 != j:
                shape_k = [1] * len(xaxes)
                shape_k[k2] = wk.size
                Wo = Wo * wk.reshape(shape_k)
        other = tuple(k2 for k2 in range(len(xaxes)) if k2 != j)
        d = (J * Wo).sum(axis=other) if other else J
        d = d / np.sum(d * wj)
        _check_edges(f"x[{j}]", d)
        x_nodes.append(x)
        x_dens.append(d)
    return QuadratureResult(nodes, dens, x_nodes, x_dens)


def _design(spec: ModelSpec) -> np.ndarray:
    """``eta = M c`` over the concatenated effects."""
    effects = spec.all_effects()
    sizes = [e.latent.expanded_size for e in effects]
    offs = np.r_[0, np.cumsum(sizes)]
    M = np.zeros((spec.n_eta, offs[-1]))
    for e, off in zip(effects, offs):
        pos = _positions(e, e.latent)
        w = np.ones(spec.n_eta) if e.weights is None else e.weights
        for r in np.flatnonzero(pos >= 0):
            M[r, off + pos[r]] += w[r]
    return M


def mixture_density(result: QuadratureResult, element: int, x: np.ndarray) -> np.ndarray:
    """Gaussian-mixture latent marginal of a Gaussian model at abscissas ``x``."""
    p, means, sds = result.gaussian_mixture
    mu, sd = means[:, element], sds[:, element]
    z = (np.asarray(x)[None, :] - mu[:, None]) / sd[:, None]
    return p @ (np.exp(-0.5 * z * z) / (sd[:, None] * math.sqrt(2 * math.pi)))


def total_variation_curves(xa, da, xb, db, n: int = 4001) -> float:
    """0.5 * integral |a - b| after linear interpolation onto a common fine grid."""
    lo, hi = min(xa[0], xb[0]), max(xa[-1], xb[-1])
    x = np.linspace(lo, hi, n)
    a = np.interp(x, xa, da, left=0.0, right=0.0)
    b = np.interp(x, xb, db, left=0.0, right=0.0)
    a /= np.trapezoid(a, x)
    b /= np.trapezoid(b, x)
    return float(0.5 * np.trapezoid(np.abs(a - b), x))
