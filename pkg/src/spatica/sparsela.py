"""Sparse symmetric-positive-definite linear algebra.

Cholesky factorization with a cached symbolic analysis, triangular solves,
log-determinants, and selective (Takahashi) inversion on a prescribed
sparsity pattern.  The factorization is an up-looking sparse Cholesky over
a fill-reducing (minimum degree) ordering; the numeric phase and the
Takahashi recursion are numba kernels so that repeated refactorizations
with a fixed pattern are cheap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy import sparse
from scipy.sparse.linalg import splu


class NotPositiveDefinite(Exception):
    """A non-positive pivot was encountered during factorization."""


class DimensionMismatch(Exception):
    """Operand dimensions do not conform."""


class PatternNotCovering(Exception):
    """Requested inverse pattern omits entries of the factorized matrix."""


# ---------------------------------------------------------------------------
# coordinate storage
# ---------------------------------------------------------------------------

@dataclass
class SparseSym:
    """Symmetric sparse matrix stored as its lower triangle in COO form.

    Entries are coordinate-sorted (row-major), contain no duplicates, and
    every diagonal position is present (possibly as an explicit zero, which
    keeps patterns structurally stable across parameter changes).
    """

    order: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    _csc: sparse.csc_matrix | None = field(default=None, repr=False, compare=False)

    # -- construction ------------------------------------------------------

    @classmethod
    def from_coo(cls, order, rows, cols, vals, validate=True):
        """Build from coordinate triples; folds upper-triangle input onto the lower."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        r = np.maximum(rows, cols)
        c = np.minimum(rows, cols)
        key = np.lexsort((c, r))
        r, c, vals = r[key], c[key], vals[key].copy()
        out = cls(int(order), r, c, vals)
        if validate:
            out.validate()
        return out

    @classmethod
    def accumulate(cls, order, rows, cols, vals):
        """Assembly constructor: sums duplicate coordinates.

        Only entries with row >= col are read; upper-triangle input is
        discarded rather than folded, so symmetric full input contributes
        each off-diagonal once. Missing diagonals are added as explicit
        zeros to keep the stored pattern factorizable.
        """
        order = int(order)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        keep = rows >= cols
        key = rows[keep] * order + cols[keep]
        uniq, inv = np.unique(key, return_inverse=True)
        acc = np.zeros(uniq.size)
        np.add.at(acc, inv, vals[keep])
        return cls(order, uniq // order, uniq % order, acc)._with_diag()

    @classmethod
    def from_scipy(cls, a):
        """Build from any scipy sparse matrix (symmetry is assumed, not checked)."""
        coo = sparse.coo_matrix(a)
        keep = coo.row >= coo.col
        out = cls.from_coo(coo.shape[0], coo.row[keep], coo.col[keep],
                           coo.data[keep], validate=False)
        return out._with_diag()

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=np.float64)
        n = a.shape[0]
        r, c = np.tril_indices(n)
        v = a[r, c]
        keep = (v != 0.0) | (r == c)  # diagonal stays even when zero
        return cls(n, r[keep].astype(np.int64), c[keep].astype(np.int64),
                   v[keep].copy())

    @classmethod
    def identity(cls, n):
        idx = np.arange(n, dtype=np.int64)
        return cls(n, idx, idx.copy(), np.ones(n))

    @classmethod
    def diag(cls, d):
        d = np.asarray(d, dtype=np.float64)
        idx = np.arange(d.size, dtype=np.int64)
        return cls(d.size, idx, idx.copy(), d.copy())

    def _with_diag(self):
        """Return self with any missing diagonal entries added as explicit zeros."""
        have = self.rows[self.rows == self.cols]
        missing = np.setdiff1d(np.arange(self.order, dtype=np.int64), have)
        if missing.size == 0:
            return self
        return SparseSym.from_coo(
            self.order,
            np.concatenate([self.rows, missing]),
            np.concatenate([self.cols, missing]),
            np.concatenate([self.vals, np.zeros(missing.size)]),
            validate=False,
        )

    # -- contracts ---------------------------------------------------------

    def validate(self):
        n = self.order
        if n <= 0:
            raise ValueError("order must be positive")
        if not (self.rows.size == self.cols.size == self.vals.size):
            raise ValueError("coordinate arrays must have equal length")
        if self.rows.size and (self.rows.min() < 0 or self.rows.max() >= n
                               or self.cols.min() < 0 or self.cols.max() >= n):
            raise ValueError("coordinates out of range")
        if np.any(self.rows < self.cols):
            raise ValueError("entries must lie in the lower triangle")
        key = self.rows * n + self.cols
        if np.any(np.diff(key) <= 0):
            raise ValueError("entries must be coordinate-sorted without duplicates")
        ndiag = int(np.count_nonzero(self.rows == self.cols))
        if ndiag != n:
            raise ValueError("all diagonal entries must be stored")

    @property
    def nnz(self):
        return self.vals.size

    def diagonal(self):
        return self.vals[self.rows == self.cols]

    def with_values(self, vals):
        """Same pattern, new values (no copy of the index arrays)."""
        vals = np.asarray(vals, dtype=np.float64)
        if vals.size != self.vals.size:
            raise DimensionMismatch("value array does not match pattern size")
        return SparseSym(self.order, self.rows, self.cols, vals)

    # -- conversions -------------------------------------------------------

    def to_csc(self):
        """Full symmetric CSC view (cached; do not mutate the result)."""
        if self._csc is None:
            off = self.rows != self.cols
            r = np.concatenate([self.rows, self.cols[off]])
            c = np.concatenate([self.cols, self.rows[off]])
            v = np.concatenate([self.vals, self.vals[off]])
            self._csc = sparse.coo_matrix((v, (r, c)),
                                          shape=(self.order, self.order)).tocsc()
        return self._csc

    def to_dense(self):
        return self.to_csc().toarray()

    def matvec(self, x):
        return self.to_csc() @ x

    # -- text serialization: "order nnz" header then "row col value" lines --

    def save_txt(self, path):
        with open(path, "w") as fh:
            fh.write(f"{self.order} {self.nnz}\n")
            for r, c, v in zip(self.rows, self.cols, self.vals):
                fh.write(f"{r} {c} {v:.17g}\n")

    @classmethod
    def load_txt(cls, path):
        with open(path) as fh:
            order, nnz = map(int, fh.readline().split())
            rows = np.empty(nnz, np.int64)
            cols = np.empty(nnz, np.int64)
            vals = np.empty(nnz, np.float64)
            for i in range(nnz):
                a, b, v = fh.readline().split()
                rows[i], cols[i], vals[i] = int(a), int(b), float(v)
        return cls.from_coo(order, rows, cols, vals)


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _etree(n, indptr, indices):
    """Elimination tree of a symmetric matrix from its full CSC pattern."""
    parent = np.full(n, -1, np.int64)
    ancestor = np.full(n, -1, np.int64)
    for k in range(n):
        for p in range(indptr[k], indptr[k + 1]):
            i = indices[p]
            while i != -1 and i < k:
                nxt = ancestor[i]
                ancestor[i] = k
                if nxt == -1:
                    parent[i] = k
                i = nxt
    return parent


@njit(cache=True)
def _symbolic_pass(n, indptr, indices, parent, count_only,
                   rowptr, rowcol, Lp, Li):
    """Row patterns of L via etree reach; counting pass then filling pass.

    Fills rowptr/rowcol (row patterns of L in topological order, diagonal
    excluded) and Lp/Li (CSC pattern of L, diagonal first then ascending
    rows per column).  Returns (rowlen, colcount) on the counting pass.
    """
    w = np.full(n, -1, np.int64)
    stack = np.empty(n, np.int64)
    buf = np.empty(n, np.int64)
    rowlen = np.zeros(n, np.int64)
    colcount = np.ones(n, np.int64)  # diagonal entry per column
    if not count_only:
        c = np.empty(n, np.int64)
        for j in range(n):
            Li[Lp[j]] = j  # diagonal first
            c[j] = Lp[j] + 1
    for k in range(n):
        w[k] = k
        top = n
        for p in range(indptr[k], indptr[k + 1]):
            i = indices[p]
            if i >= k:
                continue
            ln = 0
            while w[i] != k:
                buf[ln] = i
                ln += 1
                w[i] = k
                i = parent[i]
            while ln > 0:
                top -= 1
                ln -= 1
                stack[top] = buf[ln]
        rowlen[k] = n - top
        if count_only:
            for q in range(top, n):
                colcount[stack[q]] += 1
        else:
            base = rowptr[k]
            for q in range(top, n):
                j = stack[q]
                rowcol[base] = j
                base += 1
                Li[c[j]] = k
                c[j] += 1
    return rowlen, colcount


@njit(cache=True)
def _chol_numeric(n, Lp, Li, rowptr, rowcol, sc_ptr, sc_col, sc_src,
                  adata, pivtol, Lx):
    """Up-looking numeric factorization onto the prescribed pattern.

    Returns -1 on success or the failing row index on a non-positive pivot.
    """
    x = np.zeros(n, np.float64)
    c = np.empty(n, np.int64)
    for j in range(n):
        c[j] = Lp[j] + 1
    for k in range(n):
        for p in range(sc_ptr[k], sc_ptr[k + 1]):
            x[sc_col[p]] = adata[sc_src[p]]
        d = x[k]
        x[k] = 0.0
        for q in range(rowptr[k], rowptr[k + 1]):
            i = rowcol[q]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            Lx[c[i]] = lki
            c[i] += 1
        if d <= pivtol:
            return k
        Lx[Lp[k]] = np.sqrt(d)
    return -1


@njit(cache=True)
def _lsolve(n, Lp, Li, Lx, b):
    for j in range(n):
        bj = b[j] / Lx[Lp[j]]
        b[j] = bj
        for p in range(Lp[j] + 1, Lp[j + 1]):
            b[Li[p]] -= Lx[p] * bj


@njit(cache=True)
def _ltsolve(n, Lp, Li, Lx, b):
    for j in range(n - 1, -1, -1):
        s = b[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            s -= Lx[p] * b[Li[p]]
        b[j] = s / Lx[Lp[j]]


@njit(cache=True)
def _lsolve_many(n, Lp, Li, Lx, b):
    m = b.shape[1]
    for j in range(n):
        d = Lx[Lp[j]]
        for t in range(m):
            b[j, t] /= d
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for t in range(m):
                b[i, t] -= v * b[j, t]


@njit(cache=True)
def _ltsolve_many(n, Lp, Li, Lx, b):
    m = b.shape[1]
    for j in range(n - 1, -1, -1):
        for p in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[p]
            v = Lx[p]
            for t in range(m):
                b[j, t] -= v * b[i, t]
        d = Lx[Lp[j]]
        for t in range(m):
            b[j, t] /= d


@njit(cache=True)
def _find_pos(Lp, Li, col, row):
    """Binary search for `row` inside the (ascending) column `col` of L."""
    lo = Lp[col]
    hi = Lp[col + 1] - 1
    while lo <= hi:
        mid = (lo + hi) // 2
        v = Li[mid]
        if v == row:
            return mid
        if v < row:
            lo = mid + 1
        else:
            hi = mid - 1
    return -1


@njit(cache=True)
def _takahashi(n, Lp, Li, Lx, Z):
    """Selective inverse on pattern(L): Z[p] = (A^-1)[Li[p], j] for p in column j.

    Recursion (unit-lower/diagonal split of L L'):
        Z_ij = delta_ij / L_ii^2 - (1/L_ii) * sum_{k>i} L_ki Z_kj,  j >= i,
    processed for i = n-1..0.  Every Z_kj consulted lies on pattern(L) by
    the Cholesky fill lemma, and within a column the needed rows ascend,
    so each referenced column is scanned once with a moving pointer
    instead of per-entry binary searches.  Each off-pattern pair counts
    as one miss; the return value is 0 on a consistent factor.
    """
    misses = 0
    mmax = 0
    for i in range(n):
        h = Lp[i + 1] - Lp[i] - 1
        if h > mmax:
            mmax = h
    s = np.zeros(mmax, np.float64)
    for i in range(n - 1, -1, -1):
        lii = Lx[Lp[i]]
        base = Lp[i] + 1
        m = Lp[i + 1] - base
        for t in range(m):
            s[t] = 0.0
        for u in range(m):
            c = Li[base + u]
            lu = Lx[base + u]
            q = Lp[c]
            qend = Lp[c + 1]
            for t in range(u, m):
                target = Li[base + t]
                while q < qend and Li[q] < target:
                    q += 1
                if q < qend and Li[q] == target:
                    zv = Z[q]
                    s[t] += lu * zv
                    if t > u:
                        # symmetric partner of the same unordered pair
                        s[u] += Lx[base + t] * zv
                else:
                    misses += 1
        acc = 0.0
        for t in range(m):
            zt = -s[t] / lii
            Z[base + t] = zt
            acc += Lx[base + t] * zt
        Z[Lp[i]] = 1.0 / (lii * lii) - acc / lii
    return misses


@njit(cache=True)
def _build_scatter(n, indptr, indices, perm, iperm, sc_ptr, sc_col, sc_src,
                   count_only):
    """Map lower-triangle entries of P A P' to their source positions in A.data."""
    total = 0
    for pk in range(n):
        cnt = 0
        orig = perm[pk]
        for idx in range(indptr[orig], indptr[orig + 1]):
            pr = iperm[indices[idx]]
            if pr <= pk:
                if not count_only:
                    sc_col[total + cnt] = pr
                    sc_src[total + cnt] = idx
                cnt += 1
        total += cnt
        sc_ptr[pk + 1] = total
    return total


# ---------------------------------------------------------------------------
# symbolic analysis and factor objects
# ---------------------------------------------------------------------------

def _mmd_ordering(a_csc):
    """Minimum-degree ordering of the pattern of a_csc (via SuperLU on a proxy).

    The proxy has unit off-diagonals and a dominant diagonal so the
    factorization cannot fail; only the column permutation is kept.
    """
    n = a_csc.shape[0]
    if n <= 2:
        return np.arange(n, dtype=np.int64)
    proxy = a_csc.copy()
    proxy.data = np.ones_like(proxy.data)
    proxy = proxy + sparse.identity(n, format="csc") * float(n + 1)
    lu = splu(proxy.tocsc(), permc_spec="MMD_AT_PLUS_A",
              diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
    return lu.perm_c.astype(np.int64)


def fill_reducing_ordering(a):
    """Fill-reducing (minimum degree) ordering for a SparseSym's pattern.

    Returned as old = perm[new]; mainly useful for building structured
    orderings of larger matrices assembled from this pattern.
    """
    return _mmd_ordering(a.to_csc())


def dissection_ordering(rows, cols, coords, leaf=64):
    """Nested-dissection ordering for a pattern with geometric locality.

    Recursive coordinate bisection: cut the wider axis at the median,
    take the band of width equal to the longest edge reach on that axis
    as the separator, order both halves first and the band last.  Any
    edge spans at most the reach, so the halves never touch and the
    usual dissection fill bounds apply.  Blocks at or below `leaf`
    points, or too thin to cut, keep their incoming order.

    `rows`/`cols` are the symmetric pattern edges over `coords` row
    indices; returns old = perm[new].
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    rows = np.asarray(rows)
    cols = np.asarray(cols)
    reach = np.zeros(coords.shape[1])
    for ax in range(coords.shape[1]):
        if rows.size:
            reach[ax] = np.abs(coords[rows, ax] - coords[cols, ax]).max()
    out = np.empty(n, dtype=np.int64)
    pos = 0
    stack = [(np.arange(n, dtype=np.int64), False)]
    while stack:
        idx, emit = stack.pop()
        if emit or idx.size <= leaf:
            out[pos:pos + idx.size] = idx
            pos += idx.size
            continue
        ext = coords[idx].max(axis=0) - coords[idx].min(axis=0)
        ax = int(np.argmax(ext))
        if ext[ax] <= 2.0 * reach[ax]:
            out[pos:pos + idx.size] = idx
            pos += idx.size
            continue
        x = coords[idx, ax]
        cut = np.median(x)
        left = idx[x < cut]
        sep = idx[(x >= cut) & (x <= cut + reach[ax])]
        right = idx[x > cut + reach[ax]]
        if left.size == 0 or right.size == 0:
            out[pos:pos + idx.size] = idx
            pos += idx.size
            continue
        oax = ax - 1  # lexicographic order along the band for locality
        sep = sep[np.lexsort((coords[sep, ax], coords[sep, oax]))]
        # LIFO: left is processed first, the separator lands last
        stack.append((sep, True))
        stack.append((right, False))
        stack.append((left, False))
    return out


class SymbolicFactor:
    """Pattern-level analysis of a SparseSym, reusable across refactorizations.

    `perm` overrides the built-in minimum-degree ordering (old = perm[new]);
    callers that know the matrix structure can often order it better than a
    generic heuristic.
    """

    def __init__(self, a_csc, order_lower_keys, perm=None):
        n = a_csc.shape[0]
        self.n = n
        self.a_nnz = a_csc.nnz
        self.a_lower_keys = order_lower_keys
        if perm is None:
            self.perm = _mmd_ordering(a_csc)
        else:
            perm = np.asarray(perm, dtype=np.int64)
            if perm.shape != (n,) or np.any(np.sort(perm) != np.arange(n)):
                raise DimensionMismatch(
                    "perm must be a permutation of the matrix order")
            self.perm = perm
        self.iperm = np.empty(n, np.int64)
        self.iperm[self.perm] = np.arange(n, dtype=np.int64)

        indptr = a_csc.indptr.astype(np.int64)
        indices = a_csc.indices.astype(np.int64)

        # permuted full pattern (columns unsorted; etree/reach do not care)
        pindptr = np.zeros(n + 1, np.int64)
        pindptr[1:] = np.cumsum(np.diff(indptr)[self.perm])
        pindices = np.empty(a_csc.nnz, np.int64)
        for pk in range(n):
            s, e = indptr[self.perm[pk]], indptr[self.perm[pk] + 1]
            pindices[pindptr[pk]:pindptr[pk + 1]] = self.iperm[indices[s:e]]

        self.parent = _etree(n, pindptr, pindices)
        empty_i = np.empty(0, np.int64)
        rowlen, colcount = _symbolic_pass(n, pindptr, pindices, self.parent,
                                          True, empty_i, empty_i,
                                          empty_i, empty_i)
        self.Lp = np.zeros(n + 1, np.int64)
        self.Lp[1:] = np.cumsum(colcount)
        self.rowptr = np.zeros(n + 1, np.int64)
        self.rowptr[1:] = np.cumsum(rowlen)
        self.Li = np.empty(self.Lp[n], np.int64)
        self.rowcol = np.empty(self.rowptr[n], np.int64)
        _symbolic_pass(n, pindptr, pindices, self.parent, False,
                       self.rowptr, self.rowcol, self.Lp, self.Li)

        # scatter plan: permuted lower entries of A -> positions in A.data
        self.sc_ptr = np.zeros(n + 1, np.int64)
        nsc = _build_scatter(n, indptr, indices, self.perm, self.iperm,
                             self.sc_ptr, empty_i, empty_i, True)
        self.sc_col = np.empty(nsc, np.int64)
        self.sc_src = np.empty(nsc, np.int64)
        _build_scatter(n, indptr, indices, self.perm, self.iperm,
                       self.sc_ptr, self.sc_col, self.sc_src, False)

    @property
    def factor_nnz(self):
        return int(self.Lp[self.n])


class CholFactor:
    """Sparse Cholesky factor: P A P' = L L' with fill-reducing permutation P."""

    def __init__(self, symbolic, Lx):
        self.symbolic = symbolic
        self.Lx = Lx
        self._inv_pattern_values = None  # Takahashi result, computed lazily

    @property
    def n(self):
        return self.symbolic.n

    @property
    def perm(self):
        return self.symbolic.perm

    def matrix(self):
        """The factor L as a scipy CSC matrix (permuted indexing)."""
        s = self.symbolic
        return sparse.csc_matrix((self.Lx, s.Li, s.Lp), shape=(s.n, s.n))

    def solve(self, b):
        """Solve A x = b for a vector or a matrix of right-hand sides."""
        s = self.symbolic
        b = np.asarray(b, dtype=np.float64)
        if b.shape[0] != s.n:
            raise DimensionMismatch(
                f"rhs has leading dimension {b.shape[0]}, expected {s.n}")
        if b.ndim == 1:
            y = b[s.perm].copy()
            _lsolve(s.n, s.Lp, s.Li, self.Lx, y)
            _ltsolve(s.n, s.Lp, s.Li, self.Lx, y)
            x = np.empty_like(y)
            x[s.perm] = y
            return x
        y = np.ascontiguousarray(b[s.perm])
        _lsolve_many(s.n, s.Lp, s.Li, self.Lx, y)
        _ltsolve_many(s.n, s.Lp, s.Li, self.Lx, y)
        x = np.empty_like(y)
        x[s.perm] = y
        return x

    def half_solve_t(self, z):
        """Return x = P' L^-T z, so that cov(x) = A^-1 for white-noise z.

        Used to draw joint samples from a Gaussian with precision A.
        """
        s = self.symbolic
        z = np.asarray(z, dtype=np.float64)
        if z.shape[0] != s.n:
            raise DimensionMismatch(
                f"rhs has leading dimension {z.shape[0]}, expected {s.n}")
        if z.ndim == 1:
            y = z.copy()
            _ltsolve(s.n, s.Lp, s.Li, self.Lx, y)
            x = np.empty_like(y)
            x[s.perm] = y
            return x
        y = np.ascontiguousarray(z)
        _ltsolve_many(s.n, s.Lp, s.Li, self.Lx, y)
        x = np.empty_like(y)
        x[s.perm] = y
        return x

    def logdet(self):
        """ln det(A) = 2 sum ln L_ii."""
        s = self.symbolic
        return 2.0 * float(np.sum(np.log(self.Lx[s.Lp[:-1]])))

    def inverse_pattern_values(self):
        """Entries of A^-1 on pattern(L), aligned with the factor storage."""
        if self._inv_pattern_values is None:
            s = self.symbolic
            Z = np.zeros_like(self.Lx)
            misses = _takahashi(s.n, s.Lp, s.Li, self.Lx, Z)
            if misses:
                raise PatternNotCovering(
                    "factor pattern not closed under the recursion "
                    f"({misses} missing entries)")
            self._inv_pattern_values = Z
        return self._inv_pattern_values


def cholesky(a, symbolic=None, perm=None):
    """Factor a symmetric positive definite SparseSym (or scipy matrix).

    Passing the `symbolic` analysis of a previous factorization with the
    same pattern skips ordering and symbolic work; only numeric values are
    recomputed (`perm` is then ignored). Otherwise `perm` overrides the
    fill-reducing ordering.
    """
    if isinstance(a, SparseSym):
        a_csc = a.to_csc()
        lower_keys = a.rows * a.order + a.cols
    else:
        sym = SparseSym.from_scipy(a)
        a_csc = sym.to_csc()
        lower_keys = sym.rows * sym.order + sym.cols
    if a_csc.shape[0] != a_csc.shape[1]:
        raise DimensionMismatch("matrix must be square")
    if symbolic is None:
        symbolic = SymbolicFactor(a_csc, lower_keys, perm=perm)
    elif (symbolic.n != a_csc.shape[0]
          or not np.array_equal(symbolic.a_lower_keys, lower_keys)):
        raise DimensionMismatch("symbolic analysis does not match this pattern")

    adata = a_csc.data.astype(np.float64, copy=False)
    maxdiag = float(np.max(a_csc.diagonal()))
    pivtol = 1e-14 * max(maxdiag, 0.0)
    Lx = np.zeros(symbolic.factor_nnz, np.float64)
    bad = _chol_numeric(symbolic.n, symbolic.Lp, symbolic.Li,
                        symbolic.rowptr, symbolic.rowcol,
                        symbolic.sc_ptr, symbolic.sc_col, symbolic.sc_src,
                        adata, pivtol, Lx)
    if bad >= 0:
        raise NotPositiveDefinite(
            f"non-positive pivot at permuted row {bad} "
            f"(pivot tolerance {pivtol:.3e})")
    return CholFactor(symbolic, Lx)


def solve(factor, b):
    """Solve A x = b given a CholFactor of A."""
    return factor.solve(b)


def logdet(factor):
    """ln det(A) from its CholFactor."""
    return factor.logdet()


# ---------------------------------------------------------------------------
# selective inversion
# ---------------------------------------------------------------------------

class PartialInversePlan:
    """Precomputed lookup of requested inverse entries against a factor pattern.

    Reusable across refactorizations with the same symbolic analysis; the
    expensive part of repeated selective inversions is then just the
    Takahashi sweep itself.
    """

    def __init__(self, symbolic, rows, cols, check_cover=True):
        n = symbolic.n
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        if rows.size and (rows.min() < 0 or rows.max() >= n
                          or cols.min() < 0 or cols.max() >= n):
            raise DimensionMismatch("pattern coordinates out of range")
        self.rows = rows
        self.cols = cols
        if check_cover:
            lo_r = np.maximum(rows, cols)
            lo_c = np.minimum(rows, cols)
            req = np.unique(lo_r * n + lo_c)
            if np.setdiff1d(symbolic.a_lower_keys, req, assume_unique=False).size:
                raise PatternNotCovering(
                    "requested pattern omits entries of the factorized matrix")
        pr = symbolic.iperm[rows]
        pc = symbolic.iperm[cols]
        hi = np.maximum(pr, pc)
        lo = np.minimum(pr, pc)
        pos = np.empty(rows.size, np.int64)
        for t in range(rows.size):
            pos[t] = _find_pos(symbolic.Lp, symbolic.Li, lo[t], hi[t])
        self.pos = pos
        self.miss = np.nonzero(pos < 0)[0]
        self.miss_cols = cols[self.miss] if self.miss.size else np.empty(0, np.int64)

    def execute(self, factor):
        """Evaluate the planned entries of A^-1, aligned with (rows, cols)."""
        Z = factor.inverse_pattern_values()
        out = np.empty(self.rows.size, np.float64)
        hit = self.pos >= 0
        out[hit] = Z[self.pos[hit]]
        if self.miss.size:
            # entries outside factor fill: column solves against unit vectors
            for c in np.unique(self.miss_cols):
                e = np.zeros(factor.n)
                e[c] = 1.0
                col = factor.solve(e)
                sel = self.miss[self.miss_cols == c]
                out[sel] = col[self.rows[sel]]
        return out


def partial_inverse(factor, rows, cols):
    """Entries of A^-1 exactly on the requested symmetric pattern.

    The pattern must cover the sparsity pattern of the factorized matrix
    (the recursion needs those entries anyway); requested entries that fall
    outside the factor's fill-in are recovered by unit-vector column solves.
    Returns a SparseSym holding only the requested entries.
    """
    n = factor.n
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    key = np.unique(np.maximum(rows, cols) * n + np.minimum(rows, cols))
    plan = PartialInversePlan(factor.symbolic, key // n, key % n)
    vals = plan.execute(factor)
    return SparseSym.from_coo(n, plan.rows, plan.cols, vals, validate=False)
