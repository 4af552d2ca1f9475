"""End-to-end fit: hyperparameter mode, exploration, and all posterior marginals."""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import explore, hypermarg
from .explore import ThetaGrid, ZMap, ccd_design, explore_grid, find_mode, z_map
from .inner import GaussianApprox, LatentPosterior
from .inner import NonConvergence as InnerNonConvergence
from .lincomb import lincomb_correlation, lincomb_fast, mixture_correlation
from .marginals import STRATEGIES, Marginal, conditional_marginals, integrate_all
from .model import ModelSpec

__all__ = ["RunConfig", "FitResult", "NumericalFailure", "fit", "element_labels", "normalize_choice"]

INT_STRATEGIES = ("auto", "grid", "ccd")
HYPER_MARGINALS = ("integration_free", "asym_gaussian", "refined_grid")
LINCOMB_MODES = ("derived_only", "enlarged")
AUTO_GRID_MAX_DIM = 5


class NumericalFailure(RuntimeError):
    """Raised when the evidence cannot be evaluated where it is required; ``theta`` records where."""

    def __init__(self, message: str, theta=None):
        super().__init__(message)
        self.theta = None if theta is None else np.asarray(theta, dtype=float)


def normalize_choice(value: str, allowed) -> str:
    v = value.replace("-", "_").lower()
    if v not in allowed:
        raise ValueError(f"{value!r} is not one of {', '.join(a.replace('_', '-') for a in allowed)}")
    return v


@dataclass(frozen=True)
class RunConfig:
    strategy: str = "simplified_laplace"
    int_strategy: str = "auto"
    hyper_marginal: str = "integration_free"
    lincomb_mode: str = "derived_only"
    workers: int = 1
    dz: float = explore.DEFAULT_DZ
    drop: float = explore.DEFAULT_DROP
    f0: float = explore.DEFAULT_F0
    budget: int = explore.DEFAULT_BUDGET
    max_lattice_dim: int = hypermarg.MAX_LATTICE_DIM
    log_link_prec: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "strategy", normalize_choice(self.strategy, STRATEGIES))
        object.__setattr__(self, "int_strategy", normalize_choice(self.int_strategy, INT_STRATEGIES))
        object.__setattr__(self, "hyper_marginal", normalize_choice(self.hyper_marginal, HYPER_MARGINALS))
        object.__setattr__(self, "lincomb_mode", normalize_choice(self.lincomb_mode, LINCOMB_MODES))
        if self.workers < 1:
            raise ValueError("workers must be at least 1")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(eq=False)
class FitResult:
    spec: ModelSpec
    config: RunConfig
    posterior: LatentPosterior
    grid: ThetaGrid
    hyper_names: list
    hyper_marginals: list            # internal scale
    hyper_marginals_natural: list
    latent_marginals: list
    latent_labels: list              # (block, 1-based position) per joint element
    lincomb_names: list = field(default_factory=list)
    lincomb_marginals: list = field(default_factory=list)
    lincomb_corr: np.ndarray | None = None
    counts: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    approxs: list = field(default_factory=list)
    conditionals: list = field(default_factory=list)

    @property
    def mode(self) -> np.ndarray:
        return self.grid.mode

    def latent(self, block: str) -> list[Marginal]:
        """Marginals of one named block of the joint field."""
        return [m for m, (b, _) in zip(self.latent_marginals, self.latent_labels) if b == block]

    def hyper(self, name: str, natural: bool = True) -> Marginal:
        k = self.hyper_names.index(name)
        return (self.hyper_marginals_natural if natural else self.hyper_marginals)[k]


def element_labels(posterior: LatentPosterior) -> list[tuple[str, int]]:
    labels = [None] * posterior.n
    for name, (off, size) in posterior.layout.index_map.items():
        for i in range(size):
            labels[off + i] = (name, i + 1)
    return labels


class _Evaluator:
    """Evidence evaluations with warm starts; failures of the inner fit count as ``-inf``."""

    def __init__(self, posterior: LatentPosterior, workers: int):
        self.posterior = posterior
        self.workers = workers
        self.last_x = None

    def one(self, theta, x0=None) -> tuple[float, GaussianApprox | None]:
        try:
            ga = self.posterior.try_fit(theta, x0)
        except InnerNonConvergence:
            ga = None
        return (-math.inf, None) if ga is None else (ga.log_evidence, ga)

    def sequential(self, theta) -> float:
        """Scalar objective for the mode search; each fit starts from the previous mode."""
        val, ga = self.one(theta, self.last_x)
        if ga is not None:
            self.last_x = ga.x_star
        return val

    def batch(self, x0, keep_payload: bool):
        def run(thetas):
            job = lambda t: self.one(t, x0)
            if self.workers > 1 and len(thetas) > 1:
                with ThreadPoolExecutor(self.workers) as ex:
                    res = list(ex.map(job, thetas))
            else:
                res = [job(t) for t in thetas]
            return [(v, ga if keep_payload else None) for v, ga in res]

        return run


def _natural(marginals, params):
    out = []
    for m, p in zip(marginals, params):
        tr = p.transform
        if tr.name == "identity":
            out.append(m)
        else:
            out.append(m.transform(tr.to_natural, tr.jacobian))
    return out


def fit(spec: ModelSpec, config: RunConfig | None = None) -> FitResult:
    """Run the full approximation for ``spec`` and return all marginals."""
    config = config or RunConfig()
    t_start = time.perf_counter()
    timings: dict[str, float] = {}
    counts: dict[str, int] = {}
    enlarged = config.lincomb_mode == "enlarged" and bool(spec.lincombs)
    post = LatentPosterior(spec, log_link_prec=config.log_link_prec, enlarge_lincombs=enlarged)
    ev = _Evaluator(post, config.workers)
    m = post.m

    # hyperparameter mode and curvature
    t0 = time.perf_counter()
    theta0 = post.hyper.values.copy()
    if m == 0:
        mode_val, mode_ga = ev.one(theta0)
        if mode_ga is None:
            raise NumericalFailure("evidence is not finite at the fixed hyperparameters", theta0)
        zmap = ZMap(theta0, np.zeros((0, 0)), np.zeros((0, 0)), np.zeros(0))
    else:
        if not np.isfinite(ev.sequential(theta0)):
            raise NumericalFailure("evidence is not finite at the initial hyperparameters", theta0)
        try:
            mode, _, H = find_mode(ev.sequential, theta0)
        except explore.NonConvergence as exc:
            raise NumericalFailure(str(exc), theta0) from exc
        zmap = z_map(mode, H)
        mode_val, mode_ga = ev.one(zmap.mode, ev.last_x)
        if mode_ga is None:
            raise NumericalFailure("evidence is not finite at the hyperparameter mode", zmap.mode)
    counts["mode_search"] = post.evaluations
    timings["mode_search"] = time.perf_counter() - t0

    # exploration
    t0 = time.perf_counter()
    batch = ev.batch(mode_ga.x_star, keep_payload=True)
    int_strategy = config.int_strategy
    if int_strategy == "auto":
        int_strategy = "grid" if m <= AUTO_GRID_MAX_DIM else "ccd"
    if m == 0:
        grid = ThetaGrid(zmap, np.zeros((1, 0)), theta0[None, :], np.zeros(1), np.ones(1), "grid", mode_val,
                         [mode_ga], np.zeros((1, 0)), np.zeros(1))
    elif int_strategy == "grid":
        grid = explore_grid(batch, zmap, mode_val, dz=config.dz, drop=config.drop, budget=config.budget,
                            mode_payload=mode_ga)
    else:
        grid = ccd_design(batch, zmap, mode_val, f0=config.f0, mode_payload=mode_ga)
    if any(p is None for p in grid.payload):
        bad = grid.theta[[p is None for p in grid.payload]][0]
        raise NumericalFailure("evidence failed at a retained grid point", bad)
    counts["exploration"] = post.evaluations - counts["mode_search"]
    timings["exploration"] = time.perf_counter() - t0

    # hyperparameter marginals
    t0 = time.perf_counter()
    before = post.evaluations
    hyper_int: list[Marginal] = []
    if m > 0:
        method = config.hyper_marginal
        value_batch = ev.batch(mode_ga.x_star, keep_payload=False)
        try:
            if method == "integration_free":
                hyper_int = [r[0] for r in hypermarg.integration_free_marginals(value_batch, zmap, mode_val)]
            elif method == "asym_gaussian":
                scales = hypermarg.fit_scales(grid)
                hyper_int = [hypermarg.asym_gaussian_marginal(grid, scales, j, max_dim=config.max_lattice_dim)
                             for j in range(m)]
            else:
                hyper_int, _ = hypermarg.refined_grid_marginals(value_batch, zmap, mode_val)
        except hypermarg.NonFiniteEvaluation as exc:
            raise NumericalFailure(str(exc), zmap.mode) from exc
    counts["hyper_marginals"] = post.evaluations - before
    timings["hyper_marginals"] = time.perf_counter() - t0
    params = post.hyper.free
    hyper_nat = _natural(hyper_int, params)

    # latent marginals
    t0 = time.perf_counter()
    before = post.evaluations
    probs = grid.probabilities()
    conds = [conditional_marginals(post, ga, None, config.strategy) for ga in grid.payload]
    latent = integrate_all(conds, probs)
    labels = element_labels(post)
    counts["latent_refits"] = post.evaluations - before
    timings["latent_marginals"] = time.perf_counter() - t0

    # linear combinations
    t0 = time.perf_counter()
    lc_names = [lc.name for lc in spec.lincombs]
    lc_marg: list[Marginal] = []
    lc_corr = None
    if spec.lincombs:
        if enlarged:
            pos = [post.layout.index_map[f"lincomb:{name}"][0] for name in lc_names]
            lc_marg = [latent[p] for p in pos]
            E = np.zeros((len(pos), post.n))
            E[np.arange(len(pos)), pos] = 1.0
            lc_corr = lincomb_correlation(grid.payload, probs, E, [c.mean for c in conds])
        else:
            B = post.layout.lincomb_B.toarray()
            B = np.hstack([B, np.zeros((B.shape[0], post.n - B.shape[1]))])
            lc_marg, mom = lincomb_fast(grid.payload, probs, B, [c.mean for c in conds])
            lc_corr = mixture_correlation(mom)
    timings["lincombs"] = time.perf_counter() - t0

    counts["total"] = post.evaluations
    counts["grid_points"] = len(grid)
    timings["total"] = time.perf_counter() - t_start
    return FitResult(spec, config, post, grid, post.hyper.names, hyper_int, hyper_nat, latent, labels,
                     lc_names, lc_marg, lc_corr, counts, timings, list(grid.payload), conds)
