"""Assembly of the joint latent field: predictor layers, components, copies and links."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Mapping

import numpy as np
import scipy.sparse as sp

from .hyperparams import HyperVector
from .latent import ConstraintSet, CopyLink, LatentComponent, expand, jittered
from .likelihoods import Binding, bind_responses, check_A_density
from .model import ModelSpec, validate
from .sparse import SparseSymmetric, factorize, solve

__all__ = [
    "LINK_LOG_PRECISION",
    "LOG_PRECISION_ENV",
    "InvalidModel",
    "Layout",
    "Joint",
    "ReducedPrior",
    "link_log_precision",
    "build_layout",
    "assemble_joint",
]

LINK_LOG_PRECISION = 15.0
LOG_PRECISION_ENV = "NESTLAP_LOG_HIGH_PRECISION"


class InvalidModel(ValueError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(self.diagnostics))


def link_log_precision(value: float | None = None) -> float:
    """Log precision of the predictor, A-matrix and copy links (env override honoured)."""
    if value is not None:
        return float(value)
    env = os.environ.get(LOG_PRECISION_ENV)
    return float(env) if env else LINK_LOG_PRECISION


@dataclass(frozen=True, eq=False)
class Layout:
    """Hyperparameter-independent structure of the joint field.

    Order: ``eta*`` (only with an A matrix), ``eta``, then every effect in
    declaration order (random effects, copies, fixed effects), then linear
    combination variables when the field is enlarged.
    """

    spec: ModelSpec
    n: int
    index_map: dict
    eta_offset: int
    eta_star_offset: int | None
    obs_pos: np.ndarray          # joint position of every response row
    binding: Binding
    M: sp.csr_matrix             # eta = M c, c = concatenated effect vectors
    c_offset: int
    structures: dict             # effect name -> LatentComponent behind it
    lincomb_B: sp.csr_matrix | None
    lincomb_offset: int | None
    obs_layer: int = 0           # size of the leading observation layer
    eliminable: bool = False     # observation layer touched only by its own link

    @property
    def observed(self) -> np.ndarray:
        return self.binding.observed

    def slice(self, name: str) -> slice:
        off, size = self.index_map[name]
        return slice(off, off + size)


def _lincomb_matrix(spec: ModelSpec, index_map: Mapping, n: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    for k, lc in enumerate(spec.lincombs):
        for target, pos, w in lc.terms:
            off, _ = index_map["predictor" if target == "predictor" else target]
            rows.append(k)
            cols.append(off + pos)
            vals.append(w)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(spec.lincombs), n))


def _is_identity(A: sp.csr_matrix) -> bool:
    """An identity A adds nothing but a second link; such models use the plain layout."""
    if A.shape[0] != A.shape[1]:
        return False
    d = A - sp.eye(A.shape[0], format="csr")
    d.eliminate_zeros()
    return d.nnz == 0


def build_layout(spec: ModelSpec, enlarge_lincombs: bool = False) -> Layout:
    diags = validate(spec)
    if diags:
        raise InvalidModel(diags)
    effects = spec.all_effects()
    binding = bind_responses(spec.responses, spec.likelihoods, spec.ntrials)
    index_map: dict[str, tuple[int, int]] = {}
    off = 0
    eta_star = None
    if spec.A is not None and not _is_identity(spec.A):
        check_A_density(spec.A)
        eta_star = 0
        index_map["predictor_A"] = (0, spec.n_obs)
        off = spec.n_obs
    eta_offset = off
    index_map["predictor"] = (off, spec.n_eta)
    off += spec.n_eta
    c_offset = off
    structures: dict[str, LatentComponent] = {}
    rows, cols, vals = [], [], []
    for eff in effects:
        structure = structures[eff.latent.source] if isinstance(eff.latent, CopyLink) else eff.latent
        structures[eff.name] = structure
        size = structure.expanded_size
        index_map[eff.name] = (off, size)
        pos = eff.positions(structure)
        used = np.flatnonzero(pos >= 0)
        w = np.ones(used.size) if eff.weights is None else eff.weights[used]
        rows.append(used)
        cols.append(off - c_offset + pos[used])
        vals.append(w)
        off += size
    n_c = off - c_offset
    M = sp.csr_matrix(
        (np.concatenate(vals) if vals else np.zeros(0),
         (np.concatenate(rows) if rows else np.zeros(0, int), np.concatenate(cols) if cols else np.zeros(0, int))),
        shape=(spec.n_eta, n_c),
    )
    obs_pos = (np.arange(spec.n_obs) + (eta_star if eta_star is not None else eta_offset)).astype(np.int64)
    B = None
    lc_off = None
    if spec.lincombs:
        B = _lincomb_matrix(spec, index_map, off)
        if enlarge_lincombs:
            lc_off = off
            for k, lc in enumerate(spec.lincombs):
                index_map[f"lincomb:{lc.name}"] = (off + k, 1)
            off += len(spec.lincombs)
    obs_layer = spec.n_obs if eta_star is not None else spec.n_eta
    # an enlarged combination of eta couples the eta layer to the combination variables
    eliminable = not (lc_off is not None and eta_star is None and B[:, eta_offset:eta_offset + spec.n_eta].nnz > 0)
    return Layout(spec, off, index_map, eta_offset, eta_star, obs_pos, binding, M, c_offset, structures,
                  B, lc_off, obs_layer, eliminable)


@dataclass(frozen=True, eq=False)
class Joint:
    """Joint prior of the latent field at one hyperparameter value.

    ``Q`` is ready for factorization (rank-deficient blocks are lifted slightly);
    ``log_norm`` is the hyperparameter-dependent part of the log normalizing
    constant, so ``log pi(x | theta) = log_norm - (x - mean)' Q (x - mean) / 2``
    up to a constant.
    """

    Q: SparseSymmetric
    mean: np.ndarray
    constraints: ConstraintSet
    log_norm: float
    layout: Layout
    obs_prec: dict          # likelihood name -> gaussian observation precision
    blocks: tuple = ()      # (offset, block precision) per latent component
    links: tuple = ()       # (target slice, source slice, map, precision) per high-precision link
    reduced: "ReducedPrior | None" = None

    @property
    def index_map(self) -> dict:
        return self.layout.index_map

    def quad(self, r: np.ndarray) -> float:
        """``r' Q r`` summed block by block.

        Link terms are evaluated from their residuals, which avoids the
        cancellation between large entries of the assembled ``Q``.
        """
        if not self.blocks and not self.links:
            return self.Q.quad(r)
        total = 0.0
        for off, Qb in self.blocks:
            total += Qb.quad(r[off:off + Qb.n])
        for tgt, src, mapping, prec in self.links:
            res = r[tgt] - mapping @ r[src]
            total += prec * float(res @ res)
        return total

    def matvec(self, r: np.ndarray) -> np.ndarray:
        """``Q r`` from the same block and link-residual decomposition as :meth:`quad`."""
        if not self.blocks and not self.links:
            return self.Q.matvec(r)
        out = np.zeros_like(r, dtype=float)
        for off, Qb in self.blocks:
            out[off:off + Qb.n] += Qb.matvec(r[off:off + Qb.n])
        for tgt, src, mapping, prec in self.links:
            res = prec * (r[tgt] - mapping @ r[src])
            out[tgt] += res
            out[src] -= mapping.T @ res
        return out

    def __iter__(self):
        yield self.Q
        yield self.mean
        yield self.constraints
        yield self.index_map


@dataclass(frozen=True, eq=False)
class ReducedPrior:
    """Prior of the field without its leading observation layer.

    The observation layer (``eta*`` with an A matrix, ``eta`` otherwise) has a
    diagonal precision ``kappa`` and is tied only to ``mapping @ x[src]``. ``Q_rest``
    is the precision of the remaining positions ``[size, n)`` without that
    link, with explicit zeros on the pattern of ``mapping' mapping`` so that the
    observation layer can be eliminated without adding entries.
    """

    size: int
    Q_rest: SparseSymmetric
    src: slice                  # source positions, relative to the remaining field
    mapping: sp.csr_matrix
    kappa: float


def _slot_values(name: str, natural: Mapping[str, float]) -> dict[str, float]:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in natural.items() if k.startswith(prefix)}


def _proper_constraint_correction(Q: SparseSymmetric, cons: ConstraintSet, mean: np.ndarray) -> float:
    """``-log N(e; A m, A Q^{-1} A')`` up to a constant, for a proper block under ``A x = e``."""
    h = factorize(Q)
    W = solve(h, cons.A.T)
    S = cons.A @ W
    r = cons.e - cons.A @ mean
    sign, logdet = np.linalg.slogdet(S)
    return 0.5 * logdet + 0.5 * float(r @ np.linalg.solve(S, r))


def assemble_joint(spec: ModelSpec, theta, *, layout: Layout | None = None,
                   log_link_prec: float | None = None, enlarge_lincombs: bool = False) -> Joint:
    """Joint precision, mean and constraints of the latent field at ``theta``.

    ``theta`` is a HyperVector or a mapping from full hyperparameter names to
    natural-scale values.
    """
    layout = layout if layout is not None else build_layout(spec, enlarge_lincombs)
    natural = theta.natural() if isinstance(theta, HyperVector) else dict(theta)
    kappa = math.exp(link_log_precision(log_link_prec))
    n = layout.n
    effects = spec.all_effects()
    parts_r, parts_c, parts_v = [], [], []
    mean = np.zeros(n)
    log_norm = 0.0
    cons_sets = []
    blocks, links = [], []

    def add(r, c, v):
        parts_r.append(np.asarray(r, dtype=np.int64))
        parts_c.append(np.asarray(c, dtype=np.int64))
        parts_v.append(np.asarray(v, dtype=float))

    def add_sparse_lower(off_r, off_c, mat, scale):
        coo = sp.coo_matrix(mat)
        add(coo.row + off_r, coo.col + off_c, scale * coo.data)

    # latent components and copies
    for eff in effects:
        off, size = layout.index_map[eff.name]
        lat = eff.latent
        if isinstance(lat, CopyLink):
            src_off, _ = layout.index_map[lat.source]
            psi = natural.get(f"{lat.name}.beta", 1.0) if lat.scale_unknown else 1.0
            log_tau = lat.log_tau_copy if lat.log_tau_copy is not None else link_log_precision(log_link_prec)
            tau = math.exp(log_tau)
            d = np.arange(size)
            add(off + d, off + d, np.full(size, tau))
            add(off + d, src_off + d, np.full(size, -tau * psi))
            add(src_off + d, src_off + d, np.full(size, tau * psi * psi))
            links.append((slice(off, off + size), slice(src_off, src_off + size), psi * sp.eye(size, format="csr"), tau))
            log_norm += 0.5 * size * log_tau
            mean[off:off + size] = psi * mean[src_off:src_off + size]
            continue
        values = _slot_values(lat.name, natural)
        block = expand(lat, values)
        Qb = jittered(block)
        r, c, v = Qb.entries
        add(r + off, c + off, v)
        blocks.append((off, Qb))
        if lat.model in ("linear", "intercept"):
            mean[off] = lat.mean
        log_norm += 0.5 * block.logdet
        if block.constraints.k:
            if block.rank == block.n:
                log_norm += _proper_constraint_correction(block.Q, block.constraints, mean[off:off + size])
            cons_sets.append(block.constraints.embed(off, n))

    # predictor layer: kappa * |eta - M c|^2
    e0, ne = layout.eta_offset, spec.n_eta
    obs_parts = len(parts_r)
    c0 = layout.c_offset
    d = np.arange(ne)
    add(e0 + d, e0 + d, np.full(ne, kappa))
    add_sparse_lower(e0, c0, layout.M, -kappa)
    MtM = (layout.M.T @ layout.M).tocoo()
    keep = MtM.row >= MtM.col
    add(MtM.row[keep] + c0, MtM.col[keep] + c0, kappa * MtM.data[keep])
    c_end = c0 + layout.M.shape[1]
    mean[e0:e0 + ne] = layout.M @ mean[c0:c_end]
    links.append((slice(e0, e0 + ne), slice(c0, c_end), layout.M, kappa))
    log_norm += 0.5 * ne * math.log(kappa)
    obs_link = (obs_parts, len(parts_r), slice(c0, c_end), layout.M)

    # A layer: kappa * |eta* - A eta|^2
    if layout.eta_star_offset is not None:
        A = spec.A
        s0 = layout.eta_star_offset
        obs_parts = len(parts_r)
        d = np.arange(spec.n_obs)
        add(s0 + d, s0 + d, np.full(spec.n_obs, kappa))
        add_sparse_lower(s0, e0, A, -kappa)
        AtA = (A.T @ A).tocoo()
        keep = AtA.row >= AtA.col
        add(AtA.row[keep] + e0, AtA.col[keep] + e0, kappa * AtA.data[keep])
        mean[s0:s0 + spec.n_obs] = A @ mean[e0:e0 + ne]
        links.append((slice(s0, s0 + spec.n_obs), slice(e0, e0 + ne), A, kappa))
        log_norm += 0.5 * spec.n_obs * math.log(kappa)
        obs_link = (obs_parts, len(parts_r), slice(e0, e0 + ne), sp.csr_matrix(A))

    # enlarged linear combinations: kappa * |v - B x|^2
    if layout.lincomb_offset is not None:
        B = layout.lincomb_B
        v0 = layout.lincomb_offset
        k = B.shape[0]
        d = np.arange(k)
        add(v0 + d, v0 + d, np.full(k, kappa))
        add_sparse_lower(v0, 0, B, -kappa)
        BtB = (B.T @ B).tocoo()
        keep = BtB.row >= BtB.col
        add(BtB.row[keep], BtB.col[keep], kappa * BtB.data[keep])
        mean[v0:v0 + k] = B @ mean[:B.shape[1]]
        links.append((slice(v0, v0 + k), slice(0, B.shape[1]), B, kappa))
        log_norm += 0.5 * k * math.log(kappa)

    Q = SparseSymmetric.from_coo(n, np.concatenate(parts_r), np.concatenate(parts_c), np.concatenate(parts_v))
    reduced = _reduced_prior(n, layout, parts_r, parts_c, parts_v, obs_link, kappa)
    constraints = ConstraintSet.stack(cons_sets).check() if cons_sets else ConstraintSet.empty(n)
    obs_prec = {lk.name: natural[f"{lk.name}.prec"] for lk in spec.likelihoods if lk.family == "gaussian"}
    return Joint(Q, mean, constraints, log_norm, layout, obs_prec, tuple(blocks), tuple(links), reduced)


def _reduced_prior(n, layout: Layout, parts_r, parts_c, parts_v, obs_link, kappa) -> ReducedPrior | None:
    first, last, src, mapping = obs_link
    size = layout.obs_layer
    if not layout.eliminable or size == n:
        return None
    keep = [k for k in range(len(parts_r)) if not first <= k < last]
    mtm = (mapping.T @ mapping).tocoo()
    lower = mtm.row >= mtm.col
    rows = [parts_r[k] - size for k in keep] + [mtm.row[lower] + src.start - size]
    cols = [parts_c[k] - size for k in keep] + [mtm.col[lower] + src.start - size]
    vals = [parts_v[k] for k in keep] + [np.zeros(int(lower.sum()))]
    Q_rest = SparseSymmetric.from_coo(n - size, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals))
    rel = slice(src.start - size, src.stop - size)
    return ReducedPrior(size, Q_rest, rel, sp.csr_matrix(mapping), kappa)
