"""Precision matrices, constraints and expansions for latent model components."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .hyperparams import HyperParam, Prior, Transform
from .sparse import SparseSymmetric, kron

__all__ = [
    "InvalidHyper",
    "DisconnectedGraph",
    "RankDeficientConstraint",
    "ConstraintSet",
    "Graph",
    "Block",
    "LatentComponent",
    "CopyLink",
    "LATENT_MODELS",
    "GROUP_MODELS",
    "build_precision",
    "group_expand",
    "replicate_expand",
    "expand",
    "jittered",
]

LATENT_MODELS = ("iid", "ar1", "rw1", "rw2", "besag", "iid2d", "iid3d", "linear", "intercept")
GROUP_MODELS = ("ar1", "exchangeable", "rw1", "rw2")
INTRINSIC = ("rw1", "rw2", "besag")
# diagonal lift for rank-deficient blocks, relative to their mean diagonal
INTRINSIC_JITTER = 1e-5

DEFAULT_PREC_PRIOR = Prior("loggamma", (1.0, 5e-5))
DEFAULT_CORR_PRIOR = Prior("gaussian", (0.0, 0.15))
DEFAULT_SCALE_PRIOR = Prior("gaussian", (1.0, 10.0))


class InvalidHyper(ValueError):
    pass


class DisconnectedGraph(ValueError):
    pass


class RankDeficientConstraint(ValueError):
    pass


@dataclass(frozen=True)
class ConstraintSet:
    """Hard linear constraints ``A x = e``."""

    A: np.ndarray
    e: np.ndarray

    @classmethod
    def empty(cls, n: int) -> "ConstraintSet":
        return cls(np.zeros((0, n)), np.zeros(0))

    @property
    def k(self) -> int:
        return self.A.shape[0]

    @property
    def n(self) -> int:
        return self.A.shape[1]

    def check(self) -> "ConstraintSet":
        if self.k == 0:
            return self
        if self.k >= self.n:
            raise RankDeficientConstraint(f"{self.k} constraints on a field of size {self.n}")
        rank = np.linalg.matrix_rank(self.A)
        if rank < self.k:
            raise RankDeficientConstraint(f"constraint matrix has rank {rank} < {self.k} rows")
        return self

    def reduced(self) -> "ConstraintSet":
        """Drop linearly dependent rows (used for automatically generated constraints)."""
        if self.k <= 1:
            return self
        _, r, piv = _qr_pivoted(self.A.T)
        tol = max(self.A.shape) * np.finfo(float).eps * abs(r[0, 0])
        rank = int(np.sum(np.abs(np.diag(r)) > tol))
        keep = np.sort(piv[:rank])
        return ConstraintSet(self.A[keep], self.e[keep])

    def embed(self, offset: int, n_total: int) -> "ConstraintSet":
        A = np.zeros((self.k, n_total))
        A[:, offset:offset + self.n] = self.A
        return ConstraintSet(A, self.e.copy())

    @staticmethod
    def stack(sets) -> "ConstraintSet":
        sets = list(sets)
        n = sets[0].n
        if any(s.n != n for s in sets):
            raise ValueError("constraint sets on different field sizes")
        return ConstraintSet(np.vstack([s.A for s in sets]), np.concatenate([s.e for s in sets]))


def _qr_pivoted(a):
    import scipy.linalg

    return scipy.linalg.qr(a, mode="economic", pivoting=True)


@dataclass(frozen=True, eq=False)
class Graph:
    """Undirected neighbourhood graph for Besag models (0-based internally)."""

    n: int
    neighbors: tuple

    @classmethod
    def from_edges(cls, n: int, edges) -> "Graph":
        nb = [set() for _ in range(n)]
        for i, j in edges:
            if i != j:
                nb[i].add(j)
                nb[j].add(i)
        return cls(n, tuple(np.array(sorted(s), dtype=np.int64) for s in nb))

    @classmethod
    def parse(cls, text: str) -> "Graph":
        tokens = text.split()
        if not tokens:
            raise ValueError("empty graph file")
        n = int(tokens[0])
        lines = [ln.split() for ln in text.strip().splitlines()[1:] if ln.strip()]
        edges = []
        seen = set()
        for parts in lines:
            node, deg = int(parts[0]), int(parts[1])
            nbrs = [int(t) for t in parts[2:]]
            if len(nbrs) != deg:
                raise ValueError(f"node {node}: degree {deg} but {len(nbrs)} neighbours listed")
            if not 1 <= node <= n or any(not 1 <= v <= n for v in nbrs):
                raise ValueError(f"node index outside 1..{n}")
            seen.add(node)
            edges.extend((node - 1, v - 1) for v in nbrs)
        g = cls.from_edges(n, edges)
        for i, j in edges:
            if i not in g.neighbors[j]:
                raise ValueError("graph is not symmetric")
        return g

    @classmethod
    def read(cls, path) -> "Graph":
        return cls.parse(Path(path).read_text())

    def format(self) -> str:
        lines = [str(self.n)]
        for i, nb in enumerate(self.neighbors):
            lines.append(" ".join([str(i + 1), str(len(nb))] + [str(v + 1) for v in nb]))
        return "\n".join(lines) + "\n"

    def adjacency(self) -> sp.csr_matrix:
        rows = np.concatenate([np.full(len(nb), i) for i, nb in enumerate(self.neighbors)] or [np.zeros(0)])
        cols = np.concatenate(list(self.neighbors) or [np.zeros(0)])
        return sp.csr_matrix((np.ones(rows.size), (rows.astype(int), cols.astype(int))), shape=(self.n, self.n))

    def connected_components(self) -> np.ndarray:
        _, labels = connected_components(self.adjacency(), directed=False)
        return labels

    def __eq__(self, other):
        return (
            isinstance(other, Graph)
            and self.n == other.n
            and all(np.array_equal(a, b) for a, b in zip(self.neighbors, other.neighbors))
        )


@dataclass(frozen=True)
class Block:
    """Prior precision of one component with its constraints.

    ``logdet`` is the log generalized determinant of ``Q`` up to an additive
    constant that does not depend on the hyperparameters; ``rank`` is the rank
    of ``Q``.
    """

    Q: SparseSymmetric
    constraints: ConstraintSet
    logdet: float
    rank: int

    @property
    def n(self) -> int:
        return self.Q.n

    def __iter__(self):
        yield self.Q
        yield self.constraints


@dataclass(frozen=True, eq=False)
class LatentComponent:
    """One ``f()`` term of the linear predictor.

    ``size`` is the length of the base (single replicate, single group) vector;
    for ``iid2d``/``iid3d`` it counts all 2 (3) sub-blocks together.
    """

    name: str
    model: str
    size: int
    replicate_count: int = 1
    group_count: int = 1
    group_model: str | None = None
    graph: Graph | None = None
    constr: bool | None = None
    rw2_trend: bool = False
    allow_disconnected: bool = False
    prec: float = 0.001          # fixed prior precision of ``linear`` / ``intercept``
    mean: float = 0.0
    hyper: Mapping[str, Mapping] = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in LATENT_MODELS:
            raise ValueError(f"unknown latent model {self.model!r}")
        if self.replicate_count < 1 or self.group_count < 1:
            raise ValueError("replicate and group counts must be >= 1")
        if self.model == "iid2d" and self.size % 2:
            raise ValueError("iid2d size must be even")
        if self.model == "iid3d" and self.size % 3:
            raise ValueError("iid3d size must be a multiple of 3")
        if self.model in ("linear", "intercept") and self.size != 1:
            raise ValueError(f"{self.model} components have size 1")
        if self.model == "besag":
            if self.graph is None:
                raise ValueError("besag requires a graph")
            if self.graph.n != self.size:
                raise ValueError("graph size does not match component size")
        if self.group_model is not None and self.group_model not in GROUP_MODELS:
            raise ValueError(f"unknown group model {self.group_model!r}")
        if self.group_count > 1 and self.group_model is None:
            object.__setattr__(self, "group_model", "exchangeable")

    @property
    def expanded_size(self) -> int:
        return self.size * self.group_count * self.replicate_count

    @property
    def has_constraint(self) -> bool:
        if self.constr is not None:
            return self.constr
        return self.model in INTRINSIC

    def hyper_params(self) -> list[HyperParam]:
        """Hyperparameter slots, named ``<component>.<slot>``."""
        slots = _model_slots(self.model)
        if self.group_count > 1 and self.group_model in ("ar1", "exchangeable"):
            tr = Transform("fisher") if self.group_model == "ar1" else Transform("exchangeable", float(self.group_count))
            slots.append(("group_rho", tr, DEFAULT_CORR_PRIOR, 0.0))
        out = []
        for slot, tr, prior, init in slots:
            over = dict(self.hyper.get(slot, {}))
            if "prior" in over:
                prior = Prior(over["prior"], tuple(float(v) for v in over.get("param", ())))
            fixed = bool(over.get("fixed", False))
            if "initial" in over:
                init = float(over["initial"])
            out.append(HyperParam(f"{self.name}.{slot}", tr, prior, init, fixed))
        return out


def _model_slots(model: str):
    log = Transform("log")
    fisher = Transform("fisher")
    prec = DEFAULT_PREC_PRIOR
    corr = DEFAULT_CORR_PRIOR
    if model in ("iid", "rw1", "rw2", "besag"):
        return [("prec", log, prec, 0.0)]
    if model == "ar1":
        return [("prec", log, prec, 0.0), ("rho", fisher, corr, 0.0)]
    if model == "iid2d":
        return [("prec1", log, prec, 0.0), ("prec2", log, prec, 0.0), ("cor", fisher, corr, 0.0)]
    if model == "iid3d":
        return [(f"prec{i}", log, prec, 0.0) for i in (1, 2, 3)] + [
            (f"cor{a}{b}", fisher, corr, 0.0) for a, b in ((1, 2), (1, 3), (2, 3))
        ]
    return []


@dataclass(frozen=True, eq=False)
class CopyLink:
    """``x* ~ N(psi * x_source, tau_copy^{-1} I)`` duplicate of an earlier component.

    ``log_tau_copy=None`` uses the shared high link precision.
    """

    name: str
    source: str
    scale_unknown: bool = False
    log_tau_copy: float | None = None
    hyper: Mapping[str, Mapping] = field(default_factory=dict)

    @property
    def tau_copy(self) -> float:
        return math.exp(15.0 if self.log_tau_copy is None else self.log_tau_copy)

    def hyper_params(self) -> list[HyperParam]:
        if not self.scale_unknown:
            return []
        over = dict(self.hyper.get("beta", {}))
        prior = DEFAULT_SCALE_PRIOR
        if "prior" in over:
            prior = Prior(over["prior"], tuple(float(v) for v in over.get("param", ())))
        return [HyperParam(f"{self.name}.beta", Transform("identity"), prior,
                           float(over.get("initial", 1.0)), bool(over.get("fixed", False)))]


# --------------------------------------------------------------------------
# base precisions


def _tridiag(n, diag, off) -> SparseSymmetric:
    d = np.arange(n)
    return SparseSymmetric.from_coo(n, np.r_[d, d[1:]], np.r_[d, d[:-1]], np.r_[diag, off])


def ar1_precision(n: int, prec: float, rho: float) -> SparseSymmetric:
    """Stationary AR(1) precision with marginal precision ``prec`` and lag-one correlation ``rho``."""
    if not abs(rho) < 1 or not prec > 0:
        raise InvalidHyper(f"ar1 needs |rho| < 1 and prec > 0 (got rho={rho}, prec={prec})")
    if n == 1:
        return SparseSymmetric.diag([prec])
    kappa = prec / (1.0 - rho * rho)
    diag = np.full(n, kappa * (1.0 + rho * rho))
    diag[0] = diag[-1] = kappa
    return _tridiag(n, diag, np.full(n - 1, -kappa * rho))


def _ar1_logdet(n, prec, rho):
    return n * math.log(prec) - (n - 1) * math.log1p(-rho * rho)


def rw_structure(n: int, order: int) -> SparseSymmetric:
    if n <= order:
        raise ValueError(f"rw{order} needs more than {order} nodes")
    D = sp.eye(n, format="csr")
    for _ in range(order):
        D = (D[1:] - D[:-1])
    return SparseSymmetric.from_scipy((D.T @ D).tocoo())


def jittered(block: "Block") -> SparseSymmetric:
    """Precision with a small diagonal lift when the block is rank deficient.

    Intrinsic models are improper; the lift keeps the joint precision
    factorizable when another term (an intercept, say) spans the same null
    space. Densities use the exact generalized determinant, not the lift.
    """
    if block.rank >= block.n:
        return block.Q
    eps = INTRINSIC_JITTER * float(np.mean(block.Q.diagonal()))
    return block.Q + SparseSymmetric.identity(block.n, eps)


def besag_structure(graph: Graph) -> SparseSymmetric:
    adj = graph.adjacency().tocoo()
    keep = adj.row > adj.col
    deg = np.array([len(nb) for nb in graph.neighbors], dtype=float)
    d = np.arange(graph.n)
    return SparseSymmetric.from_coo(
        graph.n, np.r_[d, adj.row[keep]], np.r_[d, adj.col[keep]], np.r_[deg, -np.ones(keep.sum())]
    )


def _dense_block(a: np.ndarray) -> SparseSymmetric:
    """Full lower triangle kept even where entries vanish, so the pattern is fixed."""
    r, c = np.tril_indices(a.shape[0])
    return SparseSymmetric.from_coo(a.shape[0], r, c, a[r, c])


def _corr_precision(dim: int, precs, cors) -> np.ndarray:
    sd = 1.0 / np.sqrt(np.asarray(precs, dtype=float))
    R = np.eye(dim)
    iu = np.triu_indices(dim, 1)
    R[iu] = cors
    R[(iu[1], iu[0])] = cors
    eig = np.linalg.eigvalsh(R)
    if eig.min() <= 0:
        raise InvalidHyper("correlation matrix is not positive definite")
    return np.linalg.inv(R * np.outer(sd, sd))


def build_precision(component: LatentComponent, values: Mapping[str, float]) -> Block:
    """Base precision (one replicate, one group) of a component.

    ``values`` maps slot names (``prec``, ``rho``, ...) to natural-scale values.
    """
    n = component.size
    model = component.model
    cons = ConstraintSet.empty(n)
    if model in ("iid", "rw1", "rw2", "besag", "ar1", "iid2d", "iid3d"):
        for key, v in values.items():
            if key.startswith("prec") and not v > 0:
                raise InvalidHyper(f"{component.name}.{key} must be positive (got {v})")

    if model == "iid":
        tau = values["prec"]
        Q = SparseSymmetric.identity(n, tau)
        logdet, rank = n * math.log(tau), n
    elif model == "ar1":
        tau, rho = values["prec"], values["rho"]
        Q = ar1_precision(n, tau, rho)
        logdet, rank = _ar1_logdet(n, tau, rho), n
    elif model in ("rw1", "rw2"):
        order = int(model[-1])
        tau = values["prec"]
        Q = rw_structure(n, order).scaled(tau)
        rank = n - order
        logdet = rank * math.log(tau)
        rows = [np.ones(n)]
        if model == "rw2" and component.rw2_trend:
            rows.append(np.arange(n) - (n - 1) / 2.0)
        cons = ConstraintSet(np.vstack(rows), np.zeros(len(rows)))
    elif model == "besag":
        tau = values["prec"]
        labels = component.graph.connected_components()
        ncomp = int(labels.max()) + 1
        if ncomp > 1 and not component.allow_disconnected:
            raise DisconnectedGraph(f"{component.name}: graph has {ncomp} connected components")
        Q = besag_structure(component.graph).scaled(tau)
        rank = n - ncomp
        logdet = rank * math.log(tau)
        A = np.zeros((ncomp, n))
        A[labels, np.arange(n)] = 1.0
        cons = ConstraintSet(A, np.zeros(ncomp))
    elif model in ("iid2d", "iid3d"):
        dim = 2 if model == "iid2d" else 3
        m = n // dim
        precs = [values[f"prec{i}"] for i in range(1, dim + 1)]
        cors = [values["cor"]] if dim == 2 else [values["cor12"], values["cor13"], values["cor23"]]
        if any(not abs(c) < 1 for c in cors):
            raise InvalidHyper(f"{component.name}: correlations must lie in (-1, 1)")
        Qd = _corr_precision(dim, precs, cors)
        Q = kron(_dense_block(Qd), SparseSymmetric.identity(m))
        logdet, rank = m * float(np.linalg.slogdet(Qd)[1]), n
    elif model in ("linear", "intercept"):
        Q = SparseSymmetric.diag([component.prec])
        proper = component.prec > 0
        logdet, rank = (math.log(component.prec), 1) if proper else (0.0, 0)
    else:  # pragma: no cover - guarded by LatentComponent
        raise ValueError(model)

    if component.constr and model not in INTRINSIC and cons.k == 0:
        cons = ConstraintSet(np.ones((1, n)), np.zeros(1))
    return Block(Q, cons, logdet, rank)


def group_precision(model: str, g: int, rho: float | None) -> tuple[SparseSymmetric, float, int, ConstraintSet]:
    """Precision over groups (unit scale), its log-determinant, rank and constraints."""
    empty = ConstraintSet.empty(g)
    if model == "ar1":
        return ar1_precision(g, 1.0, rho), _ar1_logdet(g, 1.0, rho), g, empty
    if model == "exchangeable":
        if not (-1.0 / (g - 1) < rho < 1.0):
            raise InvalidHyper(f"exchangeable correlation {rho} outside (-1/(g-1), 1)")
        R = (1.0 - rho) * np.eye(g) + rho
        return _dense_block(np.linalg.inv(R)), -float(np.linalg.slogdet(R)[1]), g, empty
    order = int(model[-1])
    R = rw_structure(g, order)
    return R, 0.0, g - order, ConstraintSet(np.ones((1, g)), np.zeros(1))


def group_expand(component: LatentComponent, values: Mapping[str, float], base: Block | None = None) -> Block:
    """``kron(Q_group, Q_component)``; element (group j, index i) sits at ``j * size + i``."""
    base = base if base is not None else build_precision(component, values)
    g = component.group_count
    if g == 1:
        return base
    Qg, ldg, rg, cg = group_precision(component.group_model, g, values.get("group_rho"))
    n = base.n
    Q = kron(Qg, base.Q)
    logdet = base.rank * ldg + rg * base.logdet
    rank = rg * base.rank
    sets = []
    if base.constraints.k:
        # component constraints applied within each group
        sets.append(ConstraintSet(np.kron(np.eye(g), base.constraints.A), np.tile(base.constraints.e, g)))
    if cg.k:
        # intrinsic group model: sum over groups is zero for every component index
        sets.append(ConstraintSet(np.kron(cg.A, np.eye(n)), np.zeros(n)))
    cons = ConstraintSet.stack(sets).reduced() if sets else ConstraintSet.empty(g * n)
    return Block(Q, cons, logdet, rank)


def replicate_expand(component: LatentComponent, values: Mapping[str, float], inner: Block | None = None) -> Block:
    """Block-diagonal precision with ``replicate_count`` independent copies sharing hyperparameters."""
    inner = inner if inner is not None else group_expand(component, values)
    r = component.replicate_count
    if r == 1:
        return inner
    Q = kron(SparseSymmetric.identity(r), inner.Q)
    c = inner.constraints
    cons = ConstraintSet(np.kron(np.eye(r), c.A), np.tile(c.e, r)) if c.k else ConstraintSet.empty(r * inner.n)
    return Block(Q, cons, r * inner.logdet, r * inner.rank)


def expand(component: LatentComponent, values: Mapping[str, float]) -> Block:
    """Full expansion: replicate(group(base))."""
    return replicate_expand(component, values)
