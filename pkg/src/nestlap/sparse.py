"""Symmetric sparse matrices, sparse Cholesky factorization and selected inversion.

Only the lower triangle of a symmetric matrix is stored. Factorization uses a
deterministic minimum-degree ordering, a set-based symbolic analysis (cached
per sparsity pattern) and a left-looking numeric kernel. Marginal variances
come from the Takahashi recursion restricted to the pattern of the factor.
"""

from __future__ import annotations

import heapq
import threading
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from numba import njit

__all__ = [
    "NotPositiveDefinite",
    "DimensionMismatch",
    "SparseSymmetric",
    "Symbolic",
    "CholeskyHandle",
    "analyze",
    "factorize",
    "solve",
    "marginal_variances",
    "kron",
    "minimum_degree",
]

PIVOT_TOL = 1e-12
KRON_ENTRY_CAP = 10_000_000


class NotPositiveDefinite(ValueError):
    """Raised when a pivot falls below the positive-definiteness tolerance."""

    def __init__(self, column: int, pivot: float, tol: float):
        super().__init__(f"pivot {pivot:.3e} at column {column} is below tolerance {tol:.3e}")
        self.column = column
        self.pivot = pivot


class DimensionMismatch(ValueError):
    pass


class SparseSymmetric:
    """Symmetric sparse matrix held as the CSC lower triangle (diagonal included).

    Explicit zeros are kept so that matrices assembled at different
    hyperparameter values share one sparsity pattern.
    """

    __slots__ = ("n", "indptr", "indices", "data", "_key")

    def __init__(self, n: int, indptr: np.ndarray, indices: np.ndarray, data: np.ndarray):
        if n < 1:
            raise ValueError("dimension must be >= 1")
        self.n = int(n)
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.data = np.asarray(data, dtype=np.float64)
        self._key = None

    # -- construction -----------------------------------------------------

    @classmethod
    def from_coo(cls, n, rows, cols, vals) -> "SparseSymmetric":
        """Assemble from coordinate triplets; duplicates are summed.

        Entries may come from either triangle; an entry (i, j) with i < j is
        treated as (j, i), so each off-diagonal pair must be given once.
        """
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size and (rows.min() < 0 or cols.min() < 0 or rows.max() >= n or cols.max() >= n):
            raise DimensionMismatch("coordinate outside matrix")
        r = np.maximum(rows, cols)
        c = np.minimum(rows, cols)
        # every diagonal entry is structurally present
        d = np.arange(n, dtype=np.int64)
        r = np.concatenate([r, d])
        c = np.concatenate([c, d])
        v = np.concatenate([vals, np.zeros(n)])
        order = np.lexsort((r, c))
        r, c, v = r[order], c[order], v[order]
        key = c * n + r
        start = np.flatnonzero(np.r_[True, key[1:] != key[:-1]])
        data = np.add.reduceat(v, start)
        r, c = r[start], c[start]
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, c + 1, 1)
        np.cumsum(indptr, out=indptr)
        return cls(n, indptr, r, data)

    @classmethod
    def from_dense(cls, a) -> "SparseSymmetric":
        a = np.asarray(a, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionMismatch("square matrix required")
        if not np.allclose(a, a.T, rtol=1e-12, atol=1e-14 * max(1.0, np.abs(a).max())):
            raise ValueError("matrix is not symmetric")
        r, c = np.nonzero(np.tril(a))
        return cls.from_coo(a.shape[0], r, c, a[r, c])

    @classmethod
    def from_scipy(cls, m) -> "SparseSymmetric":
        m = sp.coo_matrix(m)
        if m.shape[0] != m.shape[1]:
            raise DimensionMismatch("square matrix required")
        keep = m.row >= m.col
        return cls.from_coo(m.shape[0], m.row[keep], m.col[keep], m.data[keep])

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "SparseSymmetric":
        d = np.arange(n)
        return cls.from_coo(n, d, d, np.full(n, float(scale)))

    @classmethod
    def diag(cls, values) -> "SparseSymmetric":
        values = np.asarray(values, dtype=np.float64)
        d = np.arange(values.size)
        return cls.from_coo(values.size, d, d, values)

    # -- views --------------------------------------------------------------

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    @property
    def entries(self):
        """Coordinate list (row, col, value) of the lower triangle."""
        cols = np.repeat(np.arange(self.n), np.diff(self.indptr))
        return self.indices.copy(), cols, self.data.copy()

    def lower(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def to_scipy(self) -> sp.csc_matrix:
        low = self.lower()
        strict = sp.tril(low, k=-1)
        return (low + strict.T).tocsc()

    def to_dense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.data[self.indptr[:-1]].copy()

    def matvec(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[0] != self.n:
            raise DimensionMismatch(f"vector of length {x.shape[0]} for matrix of size {self.n}")
        low = self.lower()
        return low @ x + low.T @ x - self.diagonal().reshape((-1,) + (1,) * (x.ndim - 1)) * x

    def quad(self, x) -> float:
        return float(np.dot(x, self.matvec(x)))

    def pattern_key(self):
        if self._key is None:
            self._key = (self.n, self.nnz, hash(self.indptr.tobytes()), hash(self.indices.tobytes()))
        return self._key

    def __add__(self, other: "SparseSymmetric") -> "SparseSymmetric":
        if other.n != self.n:
            raise DimensionMismatch("size mismatch in addition")
        r1, c1, v1 = self.entries
        r2, c2, v2 = other.entries
        return SparseSymmetric.from_coo(self.n, np.r_[r1, r2], np.r_[c1, c2], np.r_[v1, v2])

    def scaled(self, s: float) -> "SparseSymmetric":
        return SparseSymmetric(self.n, self.indptr, self.indices, self.data * s)

    def __repr__(self):
        return f"SparseSymmetric(n={self.n}, nnz_lower={self.nnz})"


# --------------------------------------------------------------------------
# ordering and symbolic analysis


def minimum_degree(n: int, indptr: np.ndarray, indices: np.ndarray) -> np.ndarray:
    """Greedy minimum-degree elimination order on the graph of a lower-triangle pattern.

    Ties are broken by node index, so the order is a pure function of the pattern.
    """
    adj = [set() for _ in range(n)]
    for j in range(n):
        for i in indices[indptr[j]:indptr[j + 1]]:
            if i != j:
                adj[i].add(j)
                adj[j].add(int(i))
    heap = [(len(a), v) for v, a in enumerate(adj)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nbrs = adj[v]
        for u in nbrs:
            au = adj[u]
            au.discard(v)
            au.update(nbrs)
            au.discard(u)
            heapq.heappush(heap, (len(au), u))
        adj[v] = set()
    return np.asarray(order, dtype=np.int64)


@dataclass(frozen=True)
class Symbolic:
    """Ordering and factor pattern shared by all matrices with one sparsity pattern."""

    n: int
    perm: np.ndarray          # permuted position -> original index
    iperm: np.ndarray         # original index -> permuted position
    a_map: np.ndarray         # position of each input lower entry in permuted lower storage
    a_indptr: np.ndarray      # permuted lower pattern of the input
    a_indices: np.ndarray
    l_indptr: np.ndarray      # factor pattern (diagonal first in each column)
    l_indices: np.ndarray
    r_ptr: np.ndarray         # row structure of the strict lower factor
    r_col: np.ndarray
    r_pos: np.ndarray

    @property
    def nnz(self) -> int:
        return int(self.l_indices.size)


def analyze(Q: SparseSymmetric) -> Symbolic:
    n = Q.n
    perm = minimum_degree(n, Q.indptr, Q.indices)
    iperm = np.empty(n, dtype=np.int64)
    iperm[perm] = np.arange(n)

    rows, cols, _ = Q.entries
    pr, pc = iperm[rows], iperm[cols]
    r = np.maximum(pr, pc)
    c = np.minimum(pr, pc)
    order = np.lexsort((r, c))
    a_map = np.empty(order.size, dtype=np.int64)
    a_map[order] = np.arange(order.size)
    a_indices = r[order]
    a_indptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(a_indptr, c + 1, 1)
    np.cumsum(a_indptr, out=a_indptr)

    # column patterns of L via the elimination tree
    pending: list[list[set]] = [[] for _ in range(n)]
    col_patterns = []
    for j in range(n):
        s = set(a_indices[a_indptr[j]:a_indptr[j + 1]].tolist())
        for child in pending[j]:
            s |= child
        s.discard(j)
        col_patterns.append(s)
        if s:
            parent = min(s)
            pending[parent].append(s)
        pending[j] = []
    counts = np.array([len(s) + 1 for s in col_patterns], dtype=np.int64)
    l_indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=l_indptr[1:])
    l_indices = np.empty(l_indptr[-1], dtype=np.int64)
    for j, s in enumerate(col_patterns):
        l_indices[l_indptr[j]] = j
        l_indices[l_indptr[j] + 1:l_indptr[j + 1]] = sorted(s)

    # row structure: for each row j, (column k, position of L[j, k])
    pos = np.arange(l_indices.size)
    colof = np.repeat(np.arange(n), counts)
    strict = l_indices != colof
    rr, cc, pp = l_indices[strict], colof[strict], pos[strict]
    o = np.lexsort((cc, rr))
    rr, cc, pp = rr[o], cc[o], pp[o]
    r_ptr = np.zeros(n + 1, dtype=np.int64)
    np.add.at(r_ptr, rr + 1, 1)
    np.cumsum(r_ptr, out=r_ptr)
    return Symbolic(n, perm, iperm, a_map, a_indptr, a_indices, l_indptr, l_indices, r_ptr, cc, pp)


_symbolic_cache: dict = {}
_cache_lock = threading.Lock()
_CACHE_SIZE = 64


def _symbolic_for(Q: SparseSymmetric) -> Symbolic:
    key = Q.pattern_key()
    with _cache_lock:
        sym = _symbolic_cache.get(key)
    if sym is None:
        sym = analyze(Q)
        with _cache_lock:
            if len(_symbolic_cache) >= _CACHE_SIZE:
                _symbolic_cache.pop(next(iter(_symbolic_cache)))
            _symbolic_cache[key] = sym
    return sym


# --------------------------------------------------------------------------
# numeric kernels


@njit(cache=True, nogil=True)
def _cholesky_numeric(n, a_indptr, a_indices, a_data, l_indptr, l_indices, r_ptr, r_col, r_pos, tol):
    lx = np.zeros(l_indices.size)
    w = np.zeros(n)
    for j in range(n):
        for p in range(a_indptr[j], a_indptr[j + 1]):
            w[a_indices[p]] += a_data[p]
        for q in range(r_ptr[j], r_ptr[j + 1]):
            p = r_pos[q]
            ljk = lx[p]
            for pp in range(p, l_indptr[r_col[q] + 1]):
                w[l_indices[pp]] -= lx[pp] * ljk
        d = w[j]
        if not d > tol:
            return lx, j, d
        ljj = np.sqrt(d)
        p0 = l_indptr[j]
        lx[p0] = ljj
        w[j] = 0.0
        for pp in range(p0 + 1, l_indptr[j + 1]):
            i = l_indices[pp]
            lx[pp] = w[i] / ljj
            w[i] = 0.0
    return lx, -1, 0.0


@njit(cache=True, nogil=True)
def _lookup(l_indptr, l_indices, col, row):
    lo = l_indptr[col]
    hi = l_indptr[col + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        v = l_indices[mid]
        if v == row:
            return mid
        if v < row:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


@njit(cache=True, nogil=True)
def _takahashi(n, l_indptr, l_indices, lx):
    sx = np.zeros(lx.size)
    for j in range(n - 1, -1, -1):
        p0 = l_indptr[j]
        p1 = l_indptr[j + 1]
        ljj = lx[p0]
        for pi in range(p1 - 1, p0, -1):
            i = l_indices[pi]
            s = 0.0
            for pk in range(p0 + 1, p1):
                k = l_indices[pk]
                if k >= i:
                    s += lx[pk] * sx[_lookup(l_indptr, l_indices, i, k)]
                else:
                    s += lx[pk] * sx[_lookup(l_indptr, l_indices, k, i)]
            sx[pi] = -s / ljj
        s = 0.0
        for pk in range(p0 + 1, p1):
            s += lx[pk] * sx[pk]
        sx[p0] = 1.0 / (ljj * ljj) - s / ljj
    return sx


@njit(cache=True, nogil=True)
def _solve_lower(n, l_indptr, l_indices, lx, b):
    # in place, b has shape (n, k)
    for j in range(n):
        p0 = l_indptr[j]
        for c in range(b.shape[1]):
            b[j, c] /= lx[p0]
        for pp in range(p0 + 1, l_indptr[j + 1]):
            i = l_indices[pp]
            v = lx[pp]
            for c in range(b.shape[1]):
                b[i, c] -= v * b[j, c]


@njit(cache=True, nogil=True)
def _solve_upper(n, l_indptr, l_indices, lx, b):
    for j in range(n - 1, -1, -1):
        p0 = l_indptr[j]
        for pp in range(p0 + 1, l_indptr[j + 1]):
            i = l_indices[pp]
            v = lx[pp]
            for c in range(b.shape[1]):
                b[j, c] -= v * b[i, c]
        for c in range(b.shape[1]):
            b[j, c] /= lx[p0]


# --------------------------------------------------------------------------
# public operations


@dataclass(frozen=True)
class CholeskyHandle:
    """Read-only Cholesky factorization P Q P^T = L L^T."""

    symbolic: Symbolic
    lx: np.ndarray
    logdet: float
    _selinv: list = field(default_factory=list, repr=False, compare=False)

    @property
    def n(self) -> int:
        return self.symbolic.n

    @property
    def perm(self) -> np.ndarray:
        return self.symbolic.perm

    @property
    def factor(self) -> sp.csc_matrix:
        s = self.symbolic
        return sp.csc_matrix((self.lx, s.l_indices, s.l_indptr), shape=(s.n, s.n))


def factorize(Q: SparseSymmetric, symbolic: Symbolic | None = None) -> CholeskyHandle:
    sym = symbolic if symbolic is not None else _symbolic_for(Q)
    if sym.n != Q.n:
        raise DimensionMismatch("symbolic analysis does not match matrix")
    a_data = np.empty(Q.nnz)
    a_data[sym.a_map] = Q.data
    diag = Q.diagonal()
    tol = PIVOT_TOL * max(float(np.abs(diag).max()), np.finfo(float).tiny)
    lx, bad, pivot = _cholesky_numeric(
        sym.n, sym.a_indptr, sym.a_indices, a_data, sym.l_indptr, sym.l_indices,
        sym.r_ptr, sym.r_col, sym.r_pos, tol,
    )
    if bad >= 0:
        raise NotPositiveDefinite(int(sym.perm[bad]), float(pivot), tol)
    logdet = 2.0 * float(np.sum(np.log(lx[sym.l_indptr[:-1]])))
    return CholeskyHandle(sym, lx, logdet)


def solve(handle: CholeskyHandle, b) -> np.ndarray:
    """Solve Q x = b for a vector or an (n, k) block of right-hand sides."""
    b = np.asarray(b, dtype=np.float64)
    s = handle.symbolic
    if b.shape[0] != s.n:
        raise DimensionMismatch(f"right-hand side of length {b.shape[0]} for system of size {s.n}")
    vec = b.ndim == 1
    work = np.ascontiguousarray(b[s.perm].reshape(s.n, -1))
    _solve_lower(s.n, s.l_indptr, s.l_indices, handle.lx, work)
    _solve_upper(s.n, s.l_indptr, s.l_indices, handle.lx, work)
    out = np.empty_like(work)
    out[s.perm] = work
    return out[:, 0] if vec else out


def selected_inverse(handle: CholeskyHandle) -> np.ndarray:
    """Entries of Q^{-1} on the (permuted) factor pattern, computed once per handle."""
    if not handle._selinv:
        s = handle.symbolic
        handle._selinv.append(_takahashi(s.n, s.l_indptr, s.l_indices, handle.lx))
    return handle._selinv[0]


def marginal_variances(handle: CholeskyHandle) -> np.ndarray:
    s = handle.symbolic
    sx = selected_inverse(handle)
    v = np.empty(s.n)
    v[s.perm] = sx[s.l_indptr[:-1]]
    return v


def kron(A: SparseSymmetric, B: SparseSymmetric, cap: int = KRON_ENTRY_CAP) -> SparseSymmetric:
    """Kronecker product; element (i*nB + k, j*nB + l) equals A_ij * B_kl."""
    full_nnz = (2 * A.nnz - A.n) * (2 * B.nnz - B.n)
    if full_nnz > cap:
        raise OverflowError(f"Kronecker product would hold {full_nnz} entries (cap {cap})")
    ar, ac, av = _both_triangles(A)
    br, bc, bv = _both_triangles(B)
    rows = (ar[:, None] * B.n + br[None, :]).ravel()
    cols = (ac[:, None] * B.n + bc[None, :]).ravel()
    vals = (av[:, None] * bv[None, :]).ravel()
    keep = rows >= cols
    return SparseSymmetric.from_coo(A.n * B.n, rows[keep], cols[keep], vals[keep])


def _both_triangles(M: SparseSymmetric):
    r, c, v = M.entries
    off = r != c
    return np.r_[r, c[off]], np.r_[c, r[off]], np.r_[v, v[off]]
