"""Gaussian approximation of the latent full conditional and the Laplace evidence."""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .assembly import Joint, Layout, ReducedPrior, assemble_joint, build_layout
from .hyperparams import HyperVector, log_prior
from .latent import ConstraintSet, InvalidHyper
from .likelihoods import derivatives, loglik
from .model import ModelSpec, hyper_vector
from .sparse import (CholeskyHandle, NotPositiveDefinite, SparseSymmetric, factorize, marginal_variances,
                     selected_inverse, solve)

__all__ = [
    "NonConvergence",
    "GaussianApprox",
    "LatentPosterior",
    "fit_gaussian_approx",
    "log_posterior_theta",
]

NEWTON_TOL = 1e-6
STEP_TOL = 1e-10
NEWTON_LOCAL_TOL = 1e-3
NEWTON_MAX_ITER = 50
LINE_SEARCH_HALVINGS = 20


class NonConvergence(RuntimeError):
    pass


class _FullFactor:
    """Cholesky factor of the whole precision."""

    def __init__(self, handle: CholeskyHandle):
        self.handle = handle
        self.logdet = handle.logdet

    def solve(self, b):
        return solve(self.handle, b)

    def variances(self):
        return marginal_variances(self.handle)


class _Elimination:
    """Index bookkeeping for eliminating the observation layer, fixed per sparsity pattern.

    With observation-layer precision ``a = kappa + d`` (``d`` the negative
    likelihood curvature) the Schur complement on the remaining field is
    ``S = Q_rest + M' diag(kappa d / a) M``. The terms ``M_ia M_ib`` of
    ``M' diag(w) M`` are scattered onto the lower storage of ``Q_rest``.
    """

    def __init__(self, red: ReducedPrior):
        self.size = red.size
        self.kappa = red.kappa
        self.src = red.src
        self.mapping = red.mapping
        Qr = red.Q_rest
        self.n_rest = Qr.n
        M = red.mapping
        rows, a, b, coef = [], [], [], []
        for i in range(M.shape[0]):
            lo, hi = M.indptr[i], M.indptr[i + 1]
            cols, vals = M.indices[lo:hi], M.data[lo:hi]
            for p in range(cols.size):
                for q in range(p + 1):
                    rows.append(i)
                    a.append(cols[p])
                    b.append(cols[q])
                    coef.append(vals[p] * vals[q])
        self.rows = np.asarray(rows, dtype=np.int64)
        ga = np.asarray(a, dtype=np.int64) + self.src.start
        gb = np.asarray(b, dtype=np.int64) + self.src.start
        self.ga, self.gb = ga, gb
        self.coef = np.asarray(coef, dtype=float)
        self.off = ga != gb
        r, c = np.maximum(ga, gb), np.minimum(ga, gb)
        keys = np.repeat(np.arange(Qr.n), np.diff(Qr.indptr)) * Qr.n + Qr.indices
        self.slots = np.searchsorted(keys, c * Qr.n + r)
        if not np.array_equal(keys[self.slots], c * Qr.n + r):
            raise AssertionError("reduced prior pattern lacks the observation-map entries")
        self._selinv_slots: dict = {}

    def schur(self, Q_rest: SparseSymmetric, d: np.ndarray) -> SparseSymmetric:
        w = d / (1.0 + d / self.kappa)
        data = Q_rest.data + np.bincount(self.slots, weights=self.coef * w[self.rows], minlength=Q_rest.nnz)
        return SparseSymmetric(Q_rest.n, Q_rest.indptr, Q_rest.indices, data)

    def selinv_slots(self, handle: CholeskyHandle) -> np.ndarray:
        s = handle.symbolic
        slots = self._selinv_slots.get(id(s))
        if slots is None:
            pa, pb = s.iperm[self.ga], s.iperm[self.gb]
            r, c = np.maximum(pa, pb), np.minimum(pa, pb)
            colof = np.repeat(np.arange(s.n), np.diff(s.l_indptr))
            keys = colof * s.n + s.l_indices
            slots = np.searchsorted(keys, c * s.n + r)
            self._selinv_slots = {id(s): slots}
        return slots


class _ReducedFactor:
    """Factor of the precision with the observation layer eliminated in closed form.

    The observation layer carries the large link precision on its diagonal only,
    so eliminating it analytically keeps that precision out of the Cholesky
    factor, where it would swamp the remaining entries.
    """

    def __init__(self, elim: _Elimination, a: np.ndarray, handle: CholeskyHandle):
        self.elim = elim
        self.a = a
        self.handle = handle
        self.logdet = float(np.sum(np.log(a))) + handle.logdet

    def solve(self, b):
        e = self.elim
        b = np.asarray(b, dtype=float)
        vec = b.ndim == 1
        b2 = b.reshape(b.shape[0], -1)
        a = self.a[:, None]
        bP, bR = b2[:e.size], b2[e.size:].copy()
        bR[e.src] += e.kappa * (e.mapping.T @ (bP / a))
        xR = solve(self.handle, bR).reshape(e.n_rest, -1)
        xP = (bP + e.kappa * (e.mapping @ xR[e.src])) / a
        out = np.vstack([xP, xR])
        return out[:, 0] if vec else out

    def variances(self):
        e = self.elim
        vR = marginal_variances(self.handle)
        sx = selected_inverse(self.handle)[e.selinv_slots(self.handle)]
        terms = e.coef * sx * np.where(e.off, 2.0, 1.0)
        mSm = np.bincount(e.rows, weights=terms, minlength=e.size)
        vP = 1.0 / self.a + (e.kappa / self.a) ** 2 * mSm
        return np.concatenate([vP, vR])


@dataclass(frozen=True, eq=False)
class GaussianApprox:
    """Gaussian approximation at the conditional mode ``x_star`` for one hyperparameter value."""

    x_star: np.ndarray
    Q_star: SparseSymmetric
    handle: _FullFactor | _ReducedFactor
    log_evidence: float
    joint: Joint
    constraints: ConstraintSet
    iterations: int
    converged: bool
    d3: np.ndarray               # third likelihood derivatives at the observed positions
    obs_pos: np.ndarray          # joint positions carrying a likelihood term
    theta: np.ndarray            # internal hyperparameter values
    _W: np.ndarray               # Q*^{-1} A'
    _S_inv: np.ndarray           # (A Q*^{-1} A')^{-1}

    @property
    def n(self) -> int:
        return self.x_star.size

    def variances(self) -> np.ndarray:
        """Marginal variances under the constrained Gaussian approximation."""
        v = self.handle.variances()
        if self.constraints.k:
            v = v - np.einsum("ij,jk,ik->i", self._W, self._S_inv, self._W)
        return np.maximum(v, 0.0)

    def covariance_columns(self, idx: Sequence[int]) -> np.ndarray:
        """Columns ``idx`` of the constrained covariance, shape ``(n, len(idx))``."""
        idx = np.asarray(idx, dtype=np.int64)
        E = np.zeros((self.n, idx.size))
        E[idx, np.arange(idx.size)] = 1.0
        C = self.handle.solve(E)
        if self.constraints.k:
            C = C - self._W @ (self._S_inv @ self._W[idx].T)
        return C

    def covariance_of(self, B) -> np.ndarray:
        """``B Sigma B'`` for a (k, n) matrix, via sparse solves."""
        B = np.asarray(B.todense() if hasattr(B, "todense") else B, dtype=float)
        X = self.handle.solve(B.T)
        C = B @ X
        if self.constraints.k:
            BW = B @ self._W
            C = C - BW @ self._S_inv @ BW.T
        return 0.5 * (C + C.T)


class LatentPosterior:
    """Hyperparameter-indexed family of latent Gaussian approximations for one model.

    The layout is built once; every call evaluates at the supplied internal
    hyperparameter vector. ``evaluations`` counts Laplace evidence evaluations.
    """

    def __init__(self, spec: ModelSpec, *, log_link_prec: float | None = None, enlarge_lincombs: bool = False):
        self.spec = spec
        self.log_link_prec = log_link_prec
        self.layout: Layout = build_layout(spec, enlarge_lincombs)
        self.hyper: HyperVector = hyper_vector(spec)
        self._lock = threading.Lock()
        self.evaluations = 0
        b = self.layout.binding
        groups = []
        for k, lik in enumerate(spec.likelihoods):
            rows = np.flatnonzero(b.block == k)
            if rows.size:
                groups.append((lik, self.layout.obs_pos[rows], b.y[rows], b.ntrials[rows]))
        self._groups = groups
        self.obs_pos = np.concatenate([g[1] for g in groups]) if groups else np.zeros(0, np.int64)
        self._elim: _Elimination | None = None

    @property
    def m(self) -> int:
        return self.hyper.m

    @property
    def n(self) -> int:
        return self.layout.n

    def theta(self, values=None) -> HyperVector:
        if values is None:
            return self.hyper
        if isinstance(values, HyperVector):
            return values
        return self.hyper.with_values(values)

    def joint(self, values=None) -> Joint:
        return assemble_joint(self.spec, self.theta(values), layout=self.layout, log_link_prec=self.log_link_prec)

    # likelihood pieces -----------------------------------------------------

    def loglik_sum(self, x: np.ndarray, joint: Joint) -> float:
        total = 0.0
        for lik, pos, y, nt in self._groups:
            total += float(np.sum(loglik(lik.family, y, x[pos], nt, joint.obs_prec.get(lik.name))))
        return total

    def derivatives(self, x: np.ndarray, joint: Joint):
        if not self._groups:
            z = np.zeros(0)
            return z, z, z
        parts = [derivatives(lik.family, y, x[pos], nt, joint.obs_prec.get(lik.name))
                 for lik, pos, y, nt in self._groups]
        return tuple(np.concatenate([p[i] for p in parts]) for i in range(3))

    # Gaussian approximation ------------------------------------------------

    def _factor(self, joint: Joint, Qs: SparseSymmetric, d: np.ndarray):
        """Factor of ``Qs``, the prior precision plus ``d`` on the observed positions."""
        red = joint.reduced
        if red is None:
            return _FullFactor(factorize(Qs))
        with self._lock:
            if self._elim is None:
                self._elim = _Elimination(red)
        elim = self._elim
        dP = np.zeros(red.size)
        np.add.at(dP, self.obs_pos, d)
        S = elim.schur(red.Q_rest, dP)
        return _ReducedFactor(elim, red.kappa + dP, factorize(S))

    def fit(self, values=None, x0: np.ndarray | None = None, extra: tuple[Sequence[int], Sequence[float]] | None = None,
            joint: Joint | None = None) -> GaussianApprox:
        """Newton iterations for the conditional mode, then the evidence at the mode.

        ``extra = (indices, values)`` adds hard constraints ``x[i] = value``.
        """
        theta = self.theta(values)
        joint = joint if joint is not None else self.joint(theta)
        cons = joint.constraints
        if extra is not None:
            idx, vals = (np.atleast_1d(np.asarray(a)) for a in extra)
            rows = np.zeros((idx.size, self.n))
            rows[np.arange(idx.size), idx.astype(np.int64)] = 1.0
            extra_set = ConstraintSet(rows, np.asarray(vals, dtype=float))
            cons = (ConstraintSet.stack([cons, extra_set]) if cons.k else extra_set).check()
        Q, mu = joint.Q, joint.mean
        pos = self.obs_pos
        diag_slots = Q.indptr[:-1]

        x = (mu if x0 is None else np.asarray(x0, dtype=float)).copy()
        if cons.k:
            x = x - cons.A.T @ np.linalg.solve(cons.A @ cons.A.T, cons.A @ x - cons.e)

        def objective(z):
            r = z - mu
            return -0.5 * joint.quad(r) + self.loglik_sum(z, joint)

        f = objective(x)
        iterations = 0
        converged = False
        for _ in range(NEWTON_MAX_ITER + 1):
            d1, d2, _ = self.derivatives(x, joint)
            if np.any(d2 > 0):
                raise NonConvergence("likelihood curvature is positive; family is not log-concave here")
            data = Q.data.copy()
            np.add.at(data, diag_slots[pos], -d2)
            Qs = SparseSymmetric(Q.n, Q.indptr, Q.indices, data)
            h = self._factor(joint, Qs, -d2)
            grad = -joint.matvec(x - mu)
            np.add.at(grad, pos, d1)
            if cons.k:
                grad = grad - cons.A.T @ np.linalg.solve(cons.A @ cons.A.T, cons.A @ grad)
            scale = np.sqrt(np.maximum(data[diag_slots], 1e-300))
            gnorm = float(np.max(np.abs(grad) / scale, initial=0.0))
            # Newton step solved from the gradient directly (no cancellation in x_new - x)
            step = h.solve(grad)
            if cons.k:
                W = h.solve(cons.A.T).reshape(self.n, cons.k)
                step = step - W @ np.linalg.solve(cons.A @ W, cons.A @ (x + step) - cons.e)
            if gnorm < NEWTON_TOL and float(np.max(np.abs(step), initial=0.0)) < STEP_TOL * (1.0 + np.max(np.abs(x))):
                converged = True
                break
            if iterations == NEWTON_MAX_ITER:
                break
            alpha = 1.0
            for _ in range(LINE_SEARCH_HALVINGS + 1):
                f_new = objective(x + alpha * step)
                if np.isfinite(f_new) and f_new >= f - 1e-12 * (1.0 + abs(f)):
                    break
                alpha *= 0.5
            else:
                if gnorm >= NEWTON_LOCAL_TOL:
                    raise NonConvergence("line search failed to increase the conditional log density")
                # the objective change is below its rounding error; trust the local Newton step
                alpha = 1.0
                f_new = objective(x + step)
            x = x + alpha * step
            f = f_new
            iterations += 1
        if not converged and gnorm >= NEWTON_TOL:
            raise NonConvergence(f"Newton iteration did not converge in {NEWTON_MAX_ITER} steps")

        if cons.k:
            W = h.solve(cons.A.T).reshape(self.n, cons.k)
            S = cons.A @ W
            S_inv = np.linalg.inv(S)
            log_S = np.linalg.slogdet(S)[1]
        else:
            W = np.zeros((self.n, 0))
            S_inv = np.zeros((0, 0))
            log_S = 0.0
        r = x - mu
        log_prior_x = joint.log_norm - 0.5 * joint.quad(r)
        log_g = 0.5 * h.logdet + 0.5 * log_S
        log_ev = log_prior(theta) + log_prior_x + self.loglik_sum(x, joint) - log_g
        _, _, d3 = self.derivatives(x, joint)
        return GaussianApprox(x, Qs, h, float(log_ev), joint, cons, iterations, converged, d3, pos,
                              theta.values.copy(), W, S_inv)

    def log_posterior(self, values=None, x0: np.ndarray | None = None) -> float:
        """Unnormalized ``log pi(theta | y)``; ``-inf`` where the hyperparameters are invalid."""
        ga = self.try_fit(values, x0)
        return -math.inf if ga is None else ga.log_evidence

    def try_fit(self, values=None, x0=None) -> GaussianApprox | None:
        with self._lock:
            self.evaluations += 1
        theta = self.theta(values)
        if not np.all(np.isfinite(theta.values)):
            return None
        try:
            return self.fit(theta, x0)
        except (InvalidHyper, NotPositiveDefinite, FloatingPointError):
            return None


def _as_posterior(model) -> LatentPosterior:
    return model if isinstance(model, LatentPosterior) else LatentPosterior(model)


def fit_gaussian_approx(model, theta=None, x0=None) -> GaussianApprox:
    """Gaussian approximation at ``theta`` (internal values, HyperVector, or the initial values)."""
    return _as_posterior(model).fit(theta, x0)


def log_posterior_theta(model, theta=None, x0=None) -> float:
    """Laplace approximation of ``log pi(theta | y)`` up to an additive constant."""
    return _as_posterior(model).log_posterior(theta, x0)
