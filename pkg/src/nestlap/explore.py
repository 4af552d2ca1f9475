"""Mode search, z-parametrization and grid / CCD exploration of the hyperparameter posterior."""

from __future__ import annotations

import itertools
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "NonConvergence",
    "PointBudgetExceeded",
    "IndefiniteHessian",
    "ZMap",
    "ThetaGrid",
    "find_mode",
    "hessian",
    "z_map",
    "explore_grid",
    "ccd_points",
    "ccd_design",
    "batch_evaluator",
]

FD_STEP = 0.005
HESS_STEP = 0.05                 # wider step keeps evaluation rounding out of the curvature
GRAD_TOL = 1e-4
MAX_ITER = 200
MAX_STEP = 2.0
DECREMENT_TOL = 1e-9
POLISH_STEPS = 5
NOISE_GAIN = 1e-5                # predicted gains below this are not checked against f
EIGEN_FLOOR = 1e-6
DEFAULT_DZ = 1.0
DEFAULT_DROP = 2.5
DEFAULT_F0 = 1.1
DEFAULT_BUDGET = 10_000


class NonConvergence(RuntimeError):
    pass


class PointBudgetExceeded(RuntimeError):
    pass


class IndefiniteHessian(UserWarning):
    pass


Batch = Callable[[Sequence[np.ndarray]], list]


def batch_evaluator(f: Callable[[np.ndarray], float], workers: int = 1) -> Batch:
    """Turn a scalar log density into a batch evaluator returning ``(value, None)`` pairs."""

    def run(thetas):
        if workers > 1 and len(thetas) > 1:
            with ThreadPoolExecutor(workers) as ex:
                vals = list(ex.map(f, thetas))
        else:
            vals = [f(t) for t in thetas]
        return [(float(v), None) for v in vals]

    return run


def gradient(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    """Central-difference gradient; evaluation order is fixed (+h, -h per axis)."""
    g = np.empty(x.size)
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = h
        g[i] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def hessian(f, x: np.ndarray, h: float = HESS_STEP, f0: float | None = None) -> np.ndarray:
    """Central second differences of ``f`` at ``x`` (returns the Hessian, not its negative)."""
    m = x.size
    fx = f(x) if f0 is None else f0
    H = np.empty((m, m))
    E = np.eye(m) * h
    for i in range(m):
        H[i, i] = (f(x + E[i]) - 2 * fx + f(x - E[i])) / h**2
    for i in range(m):
        for j in range(i + 1, m):
            v = (f(x + E[i] + E[j]) - f(x + E[i] - E[j]) - f(x - E[i] + E[j]) + f(x - E[i] - E[j])) / (4 * h * h)
            H[i, j] = H[j, i] = v
    return H


def find_mode(f, x0, *, h: float = FD_STEP, hess_step: float = HESS_STEP, gtol: float = GRAD_TOL, max_iter: int = MAX_ITER):
    """Maximize ``f`` by BFGS with central-difference gradients.

    Returns ``(mode, f(mode), negative Hessian)``. Non-finite values are treated
    as infeasible and trigger step halving.
    """
    x = np.asarray(x0, dtype=float).copy()
    fx = f(x)
    if not np.isfinite(fx):
        raise NonConvergence("log posterior is not finite at the initial hyperparameters")
    m = x.size
    g = -gradient(f, x, h)
    Hinv = np.eye(m)
    first = True
    for it in range(max_iter):
        if np.linalg.norm(g) < gtol:
            break
        p = -Hinv @ g
        if g @ p >= 0:
            Hinv = np.eye(m)
            p = -g
        norm = np.linalg.norm(p)
        if norm > MAX_STEP:
            p *= MAX_STEP / norm
        t = 1.0
        for _ in range(40):
            f_new = f(x + t * p)
            if np.isfinite(f_new) and -f_new <= -fx + 1e-4 * t * (g @ p):
                break
            t *= 0.5
        else:
            break                                   # hand over to the Newton polish below
        s = t * p
        x = x + s
        fx = f_new
        g_new = -gradient(f, x, h)
        yv = g_new - g
        sy = s @ yv
        if sy > 1e-12:
            if first:
                Hinv = np.eye(m) * (sy / (yv @ yv))
                first = False
            rho = 1.0 / sy
            I = np.eye(m)
            Hinv = (I - rho * np.outer(s, yv)) @ Hinv @ (I - rho * np.outer(yv, s)) + rho * np.outer(s, s)
        g = g_new
        if np.max(np.abs(s)) < 1e-10:
            break
    # Newton polish: on strongly curved ridges the gradient norm overstates the
    # distance to the mode, so convergence is judged by the predicted gain
    H = -hessian(f, x, hess_step, fx)
    for _ in range(POLISH_STEPS + 1):
        if np.linalg.norm(g) < gtol:
            return x, fx, H
        try:
            step = -np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        gain = -0.5 * float(g @ step)
        if gain < 0:
            break
        if gain < DECREMENT_TOL:
            return x, fx, H
        f_new = f(x + step)
        if not np.isfinite(f_new) or (f_new <= fx and gain > NOISE_GAIN):
            break
        x, fx = x + step, f_new
        g = -gradient(f, x, h)
        H = -hessian(f, x, hess_step, fx)
    raise NonConvergence(f"mode search stalled with gradient norm {np.linalg.norm(g):.3g}")


@dataclass(frozen=True)
class ZMap:
    """``theta(z) = mode + V diag(sqrt(lam)) z`` with ``Sigma = H^{-1} = V diag(lam) V'``."""

    mode: np.ndarray
    H: np.ndarray
    V: np.ndarray
    lam: np.ndarray

    @property
    def m(self) -> int:
        return self.mode.size

    @property
    def Sigma(self) -> np.ndarray:
        return (self.V * self.lam) @ self.V.T

    def theta(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return self.mode + (z * np.sqrt(self.lam)) @ self.V.T

    def z(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return ((theta - self.mode) @ self.V) / np.sqrt(self.lam)


def z_map(mode, H) -> ZMap:
    """Eigen-map of the inverse negative Hessian, repairing marginal indefiniteness."""
    mode = np.asarray(mode, dtype=float)
    H = np.asarray(H, dtype=float)
    H = 0.5 * (H + H.T)
    h_eig, V = np.linalg.eigh(H)
    floor = EIGEN_FLOOR * max(h_eig.max(), 0.0)
    if h_eig.max() <= 0:
        raise NonConvergence("negative Hessian has no positive eigenvalue")
    if np.any(h_eig < floor):
        warnings.warn(f"negative Hessian eigenvalues {h_eig[h_eig < floor]} floored at {floor:.3g}",
                      IndefiniteHessian, stacklevel=2)
        h_eig = np.maximum(h_eig, floor)
        H = (V * h_eig) @ V.T
    lam = 1.0 / h_eig
    # eigenvalues of Sigma in ascending order, deterministic signs
    order = np.argsort(lam, kind="stable")
    lam, V = lam[order], V[:, order]
    big = np.argmax(np.abs(V), axis=0)
    V = V * np.where(V[big, np.arange(V.shape[1])] < 0, -1.0, 1.0)
    return ZMap(mode, H, V, lam)


@dataclass(frozen=True, eq=False)
class ThetaGrid:
    """Exploration points with log densities relative to the mode and integration weights."""

    zmap: ZMap
    z: np.ndarray            # (K, m)
    theta: np.ndarray        # (K, m)
    logdens: np.ndarray      # (K,)
    weight: np.ndarray       # (K,)
    strategy: str
    mode_value: float
    payload: list = field(default_factory=list)
    evaluated_z: np.ndarray | None = None     # every evaluated point (kept or not)
    evaluated_logdens: np.ndarray | None = None
    dz: float = DEFAULT_DZ

    @property
    def mode(self) -> np.ndarray:
        return self.zmap.mode

    @property
    def H(self) -> np.ndarray:
        return self.zmap.H

    @property
    def m(self) -> int:
        return self.zmap.m

    def __len__(self) -> int:
        return self.z.shape[0]

    def probabilities(self) -> np.ndarray:
        """Normalized mixture weights ``exp(logdens) * weight``."""
        a = self.logdens + np.log(self.weight)
        w = np.exp(a - a.max())
        return w / w.sum()

    def axis_profile(self, j: int):
        """Distances and log-density drops of evaluated points on the z axis ``j``."""
        Z = self.evaluated_z if self.evaluated_z is not None else self.z
        L = self.evaluated_logdens if self.evaluated_logdens is not None else self.logdens
        others = np.delete(np.arange(self.m), j)
        on_axis = np.all(np.abs(Z[:, others]) < 1e-12, axis=1)
        return Z[on_axis, j], -L[on_axis]


def explore_grid(evaluate: Batch, zmap: ZMap, mode_value: float, *, dz: float = DEFAULT_DZ,
                 drop: float = DEFAULT_DROP, budget: int = DEFAULT_BUDGET, mode_payload=None) -> ThetaGrid:
    """Breadth-first walk over the integer lattice in z, keeping points within ``drop`` of the mode.

    The frontier is processed level by level in lexicographic order, so the
    kept set does not depend on how ``evaluate`` schedules its work.
    """
    m = zmap.m
    origin = (0,) * m
    seen = {origin: (0.0, mode_payload)}
    kept = [origin]
    frontier = [origin]
    evaluated = 1
    while frontier:
        cand = set()
        for p in frontier:
            for j in range(m):
                for s in (-1, 1):
                    q = list(p)
                    q[j] += s
                    q = tuple(q)
                    if q not in seen:
                        cand.add(q)
        cand = sorted(cand)
        if not cand:
            break
        evaluated += len(cand)
        if evaluated > budget:
            raise PointBudgetExceeded(f"grid exploration needs more than {budget} evaluations")
        results = evaluate([zmap.theta(np.array(q, dtype=float) * dz) for q in cand])
        frontier = []
        for q, (val, payload) in zip(cand, results):
            rel = val - mode_value
            seen[q] = (rel, payload)
            if np.isfinite(rel) and -rel < drop:
                kept.append(q)
                frontier.append(q)
    kept.sort()
    Z = np.array(kept, dtype=float) * dz
    all_keys = sorted(seen)
    return ThetaGrid(
        zmap=zmap,
        z=Z,
        theta=np.array([zmap.theta(z) for z in Z]),
        logdens=np.array([seen[k][0] for k in kept]),
        weight=np.full(len(kept), dz**m),
        strategy="grid",
        mode_value=mode_value,
        payload=[seen[k][1] for k in kept],
        evaluated_z=np.array(all_keys, dtype=float) * dz,
        evaluated_logdens=np.array([seen[k][0] for k in all_keys]),
        dz=dz,
    )


def _factorial(m: int) -> np.ndarray:
    if m <= 5:
        return np.array(list(itertools.product((-1.0, 1.0), repeat=m)))
    base = np.array(list(itertools.product((-1.0, 1.0), repeat=m - 1)))
    return np.column_stack([base, np.prod(base, axis=1)])


def ccd_points(m: int, f0: float = DEFAULT_F0):
    """CCD points in z-space and probability weights reproducing N(0, I) moments.

    Returns ``(Z, w)`` with the center first, then the ``2m`` axial points, then
    the (fractional for ``m > 5``) factorial corners; all non-center points lie on
    the sphere of radius ``f0 * sqrt(m)``.
    """
    if m < 1:
        raise ValueError("CCD needs at least one dimension")
    r = f0 * math.sqrt(m)
    axial = np.vstack([s * r * np.eye(m)[j] for j in range(m) for s in (-1.0, 1.0)])
    corners = f0 * _factorial(m) if m >= 2 else np.zeros((0, m))
    Z = np.vstack([np.zeros((1, m)), axial, corners])
    n_sphere = Z.shape[0] - 1
    w1 = 1.0 / (f0**2 * n_sphere)
    w0 = 1.0 - n_sphere * w1
    if w0 <= 0:
        raise ValueError("f0 must exceed 1 so the center weight is positive")
    w = np.r_[w0, np.full(n_sphere, w1)]
    return Z, w


def ccd_design(evaluate: Batch, zmap: ZMap, mode_value: float, *, f0: float = DEFAULT_F0,
               mode_payload=None) -> ThetaGrid:
    """Central composite design in z with weights ``w_k / phi(z_k)``."""
    m = zmap.m
    Z, w = ccd_points(m, f0)
    results = evaluate([zmap.theta(z) for z in Z[1:]])
    logdens = np.r_[0.0, [v - mode_value for v, _ in results]]
    payload = [mode_payload] + [p for _, p in results]
    log_phi = -0.5 * np.sum(Z**2, axis=1) - 0.5 * m * math.log(2 * math.pi)
    weight = w * np.exp(-log_phi)
    return ThetaGrid(zmap, Z, np.array([zmap.theta(z) for z in Z]), logdens, weight, "ccd", mode_value, payload,
                     Z.copy(), logdens.copy(), dz=f0 * math.sqrt(m))
