"""Compressed-sparse-row matrices and preconditioned conjugate gradients.

The periodic cell systems are singular (constants span the kernel), so besides
the plain PCG there is a projected variant that keeps the right-hand side and
every iterate orthogonal to constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SolverError(RuntimeError):
    """Raised when an iterative solve breaks down (NaN, loss of definiteness)."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class LinearSolveReport:
    iterations: int
    final_residual_norm: float
    initial_residual_norm: float
    converged: bool


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix in canonical form (sorted, duplicate-free columns per row)."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _csr: sp.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        ro = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        ci = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        va = np.ascontiguousarray(self.values, dtype=np.float64)
        if ro.shape != (self.n_rows + 1,):
            raise ValueError("row_offsets must have length n_rows + 1")
        if ro[0] != 0 or ro[-1] != ci.size or np.any(np.diff(ro) < 0):
            raise ValueError("row_offsets must be nondecreasing from 0 to nnz")
        if ci.size != va.size:
            raise ValueError("col_indices and values differ in length")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise ValueError("column index out of range")
        for name, arr in (("row_offsets", ro), ("col_indices", ci), ("values", va)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        csr = sp.csr_matrix((va, ci, ro), shape=(self.n_rows, self.n_cols))
        object.__setattr__(self, "_csr", csr)

    @classmethod
    def from_coo(cls, rows, cols, vals, shape) -> "SparseMatrix":
        """Build from triplets; duplicates are summed in a fixed (sorted) order."""
        rows = np.asarray(rows, dtype=np.int64).ravel()
        cols = np.asarray(cols, dtype=np.int64).ravel()
        vals = np.asarray(vals, dtype=np.float64).ravel()
        n_rows, n_cols = shape
        if rows.size == 0:
            return cls(n_rows, n_cols, np.zeros(n_rows + 1, np.int64),
                       np.zeros(0, np.int64), np.zeros(0))
        order = np.lexsort((cols, rows))
        r, c, v = rows[order], cols[order], vals[order]
        start = np.ones(r.size, dtype=bool)
        start[1:] = (r[1:] != r[:-1]) | (c[1:] != c[:-1])
        idx = np.flatnonzero(start)
        summed = np.add.reduceat(v, idx)
        r_u, c_u = r[idx], c[idx]
        offsets = np.zeros(n_rows + 1, dtype=np.int64)
        np.cumsum(np.bincount(r_u, minlength=n_rows), out=offsets[1:])
        return cls(n_rows, n_cols, offsets, c_u, summed)

    @classmethod
    def from_dense(cls, a) -> "SparseMatrix":
        a = np.asarray(a, dtype=np.float64)
        r, c = np.nonzero(a)
        return cls.from_coo(r, c, a[r, c], a.shape)

    @classmethod
    def identity(cls, n: int) -> "SparseMatrix":
        return cls.diag(np.ones(n))

    @classmethod
    def diag(cls, d) -> "SparseMatrix":
        d = np.asarray(d, dtype=np.float64)
        n = d.size
        return cls(n, n, np.arange(n + 1), np.arange(n), d.copy())

    @property
    def shape(self):
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def row_indices(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_rows), np.diff(self.row_offsets))

    def diagonal(self) -> np.ndarray:
        return self._csr.diagonal()

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def max_abs(self) -> float:
        return float(np.abs(self.values).max()) if self.nnz else 0.0

    def transpose(self) -> "SparseMatrix":
        return SparseMatrix.from_coo(self.col_indices, self.row_indices(), self.values,
                                     (self.n_cols, self.n_rows))

    def is_symmetric(self, rtol: float = 1e-12) -> bool:
        if self.n_rows != self.n_cols:
            return False
        t = self.transpose()
        if not (np.array_equal(t.row_offsets, self.row_offsets)
                and np.array_equal(t.col_indices, self.col_indices)):
            return False
        return bool(np.all(np.abs(t.values - self.values) <= rtol * max(self.max_abs(), 1e-300)))

    def submatrix(self, rows, cols=None) -> "SparseMatrix":
        """Rows/cols picked by index arrays (cols defaults to rows)."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = rows if cols is None else np.asarray(cols, dtype=np.int64)
        sub = self._csr[rows][:, cols].tocsr()
        sub.sort_indices()
        return SparseMatrix(sub.shape[0], sub.shape[1], sub.indptr, sub.indices, sub.data)

    def remap(self, index_map, n_new: int) -> "SparseMatrix":
        """Accumulate rows and columns through ``index_map`` (full -> reduced)."""
        index_map = np.asarray(index_map, dtype=np.int64)
        return SparseMatrix.from_coo(index_map[self.row_indices()],
                                     index_map[self.col_indices], self.values, (n_new, n_new))

    def __add__(self, other: "SparseMatrix") -> "SparseMatrix":
        if self.shape != other.shape:
            raise ValueError("shape mismatch")
        rows = np.concatenate([self.row_indices(), other.row_indices()])
        cols = np.concatenate([self.col_indices, other.col_indices])
        vals = np.concatenate([self.values, other.values])
        return SparseMatrix.from_coo(rows, cols, vals, self.shape)

    def scaled(self, c: float) -> "SparseMatrix":
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets, self.col_indices,
                            c * self.values)

    def __matmul__(self, x):
        return spmv(self, x)


def spmv(a: SparseMatrix, x) -> np.ndarray:
    """A @ x. Rows are traversed serially, so results are bit-reproducible."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.size != a.n_cols:
        raise ValueError(f"dimension mismatch: matrix has {a.n_cols} columns, vector {x.shape}")
    return a._csr @ x


def _dot(u, v) -> float:
    # pairwise summation in numpy; avoids threaded BLAS reductions
    return float(np.add.reduce(u * v))


def _default_max_iter(n):
    return max(20 * n, 10)


def cg_solve(a: SparseMatrix, b, tol: float = 1e-10, max_iter: int | None = None,
             preconditioner="jacobi", x0=None):
    """Preconditioned CG for symmetric positive (semi-)definite ``a``.

    ``preconditioner`` is "jacobi", "none" or a callable applying an SPD
    approximate inverse to a residual (see FactorizedPreconditioner).

    Stops when ||b - a x|| <= tol * ||b||. Returns ``(x, LinearSolveReport)``;
    hitting ``max_iter`` yields ``converged=False`` rather than an exception.
    """
    return _pcg(a, np.asarray(b, dtype=np.float64), tol, max_iter, preconditioner, x0, None)


def cg_solve_meanzero(a: SparseMatrix, b, weights, tol: float = 1e-10,
                      max_iter: int | None = None, preconditioner="jacobi", x0=None):
    """CG for a PSD system whose kernel is the constant vector.

    The load is projected orthogonal to constants, the iterates are kept at
    zero weighted mean (``sum(weights * x) == 0``), and the returned solution is
    the unique one with that normalization.
    """
    w = np.asarray(weights, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if w.shape != b.shape or np.any(w <= 0):
        raise ValueError("weights must be positive and match b")
    b = b - b.mean()
    return _pcg(a, b, tol, max_iter, preconditioner, x0, w / w.sum())


class FactorizedPreconditioner:
    """Exact solves with a fixed reference matrix, applied as an approximate inverse.

    Useful when many systems are small perturbations of one operator. For a
    singular periodic operator pass ``shift`` (e.g. lumped weights): a tiny
    multiple of diag(shift) is added before factorizing.
    """

    def __init__(self, matrix: SparseMatrix, shift=None, rel_shift: float = 1e-8):
        m = matrix._csr
        if shift is not None:
            shift = np.asarray(shift, dtype=np.float64)
            scale = rel_shift * float(np.abs(matrix.diagonal()).mean()) / float(shift.mean())
            m = m + sp.diags(scale * shift)
        self.n = matrix.n_rows
        # the matrix is symmetric: a symmetric fill-reducing order keeps the
        # factors about half as dense as the default column ordering
        self._lu = spla.splu(sp.csc_matrix(m), permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                             options={"SymmetricMode": True})

    def __call__(self, r):
        return self._lu.solve(np.asarray(r, dtype=np.float64))


def _pcg(a, b, tol, max_iter, preconditioner, x0, wnorm):
    n = a.n_rows
    if a.n_rows != a.n_cols or b.size != n:
        raise ValueError("dimension mismatch")
    if max_iter is None:
        max_iter = _default_max_iter(n)
    if callable(preconditioner):
        apply = preconditioner
    elif preconditioner == "jacobi":
        d = a.diagonal()
        if np.any(d <= 0):
            raise SolverError("Jacobi preconditioner needs a positive diagonal")
        inv_d = 1.0 / d

        def apply(v):
            return v * inv_d
    elif preconditioner == "none":
        def apply(v):
            return v
    else:
        raise ValueError(f"unknown preconditioner {preconditioner!r}")

    def project(v):
        return v - _dot(wnorm, v) if wnorm is not None else v

    def center(v):
        # residuals live in the range of a, i.e. orthogonal to constants
        return v - v.mean() if wnorm is not None else v

    x = np.zeros(n) if x0 is None else project(np.array(x0, dtype=np.float64))
    bnorm = np.sqrt(_dot(b, b))
    if bnorm == 0.0:
        return np.zeros(n), LinearSolveReport(0, 0.0, 0.0, True)
    target = tol * bnorm
    r = center(b - spmv(a, x))
    rnorm = r0 = np.sqrt(_dot(r, r))
    it = 0
    for _restart in range(4):
        if rnorm <= target or it >= max_iter:
            break
        z = center(apply(r))
        p = z.copy()
        rz = _dot(r, z)
        while it < max_iter:
            it += 1
            q = spmv(a, p)
            pq = _dot(p, q)
            if not np.isfinite(pq):
                raise SolverError("NaN/Inf encountered in CG",
                                  LinearSolveReport(it, float("nan"), r0, False))
            if pq <= 0.0:
                raise SolverError(f"CG breakdown: non-positive curvature p^T A p = {pq:.3e}",
                                  LinearSolveReport(it, rnorm, r0, False))
            alpha = rz / pq
            x += alpha * p
            r -= alpha * q
            if wnorm is not None:
                r = center(r)
            rnorm = np.sqrt(_dot(r, r))
            if not np.isfinite(rnorm):
                raise SolverError("NaN/Inf in CG residual",
                                  LinearSolveReport(it, float("nan"), r0, False))
            if rnorm <= target:
                break
            z = center(apply(r))
            rz_new = _dot(r, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
        # the recursive residual drifts; restart from the true one if needed
        r = center(b - spmv(a, x))
        rnorm = np.sqrt(_dot(r, r))
    if wnorm is not None:
        x = project(x)
    return x, LinearSolveReport(it, float(rnorm), float(r0), bool(rnorm <= target))
