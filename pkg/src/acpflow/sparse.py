"""Sparse storage, SpMV kernels, regularized block factors, and restarted GMRES.

Everything here is deliberately deterministic: fixed traversal orders, no
randomized starts, and dense LAPACK factorizations that are computed once and
then only applied. The GMRES implementation uses modified Gram-Schmidt with
Givens rotations and supports an optional left preconditioner supplied as a
callable.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse


class SparseFormatError(ValueError):
    """Raised when triplet/CSR arrays violate the storage invariants."""


class SingularFactorError(ValueError):
    """Raised when a block stays numerically singular after regularization."""


class NonFiniteOperatorError(ValueError):
    """Raised when an operator or preconditioner produces NaN/Inf values."""


class SparseCoo:
    """Real sparse matrix in canonical coordinate form.

    Canonical means duplicate triplets are summed and entries are sorted
    row-major. Construction always canonicalizes.
    """

    __slots__ = ("rows", "cols", "vals", "shape")

    def __init__(self, rows, cols, vals, shape: tuple[int, int]):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.ndim == cols.ndim == vals.ndim == 1):
            raise SparseFormatError("rows, cols, vals must be 1-D arrays")
        if not (rows.size == cols.size == vals.size):
            raise SparseFormatError(
                f"triplet arrays disagree in length: {rows.size}, {cols.size}, {vals.size}"
            )
        m, n = int(shape[0]), int(shape[1])
        if rows.size and (rows.min() < 0 or rows.max() >= m):
            raise SparseFormatError("row index out of range")
        if cols.size and (cols.min() < 0 or cols.max() >= n):
            raise SparseFormatError("column index out of range")
        mat = scipy.sparse.coo_matrix((vals, (rows, cols)), shape=(m, n))
        mat.sum_duplicates()  # also sorts row-major
        self.rows = mat.row.astype(np.int64)
        self.cols = mat.col.astype(np.int64)
        self.vals = mat.data.astype(np.float64)
        self.shape = (m, n)

    @property
    def nnz(self) -> int:
        return self.vals.size

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape)
        np.add.at(out, (self.rows, self.cols), self.vals)
        return out

    def __repr__(self) -> str:
        return f"SparseCoo(shape={self.shape}, nnz={self.nnz})"


class SparseCsr:
    """Real sparse matrix in compressed sparse row form.

    Backed by a scipy CSR matrix for the actual product kernel; ``row_ptr``,
    ``col_idx`` and ``vals`` expose the raw arrays.
    """

    __slots__ = ("row_ptr", "col_idx", "vals", "shape", "_mat")

    def __init__(self, row_ptr, col_idx, vals, shape: tuple[int, int]):
        row_ptr = np.asarray(row_ptr, dtype=np.int64)
        col_idx = np.asarray(col_idx, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        m, n = int(shape[0]), int(shape[1])
        if row_ptr.size != m + 1:
            raise SparseFormatError(f"row_ptr length {row_ptr.size} != m+1 = {m + 1}")
        if np.any(np.diff(row_ptr) < 0):
            raise SparseFormatError("row_ptr must be non-decreasing")
        if col_idx.size != vals.size or col_idx.size != row_ptr[-1]:
            raise SparseFormatError("col_idx/vals inconsistent with row_ptr")
        if col_idx.size and (col_idx.min() < 0 or col_idx.max() >= n):
            raise SparseFormatError("column index out of range")
        mat = scipy.sparse.csr_matrix((vals, col_idx, row_ptr), shape=(m, n))
        mat.sort_indices()
        self._mat = mat
        self.row_ptr = mat.indptr.astype(np.int64)
        self.col_idx = mat.indices.astype(np.int64)
        self.vals = mat.data
        self.shape = (m, n)

    @classmethod
    def _from_scipy(cls, mat: scipy.sparse.csr_matrix) -> "SparseCsr":
        mat = mat.tocsr()
        mat.sum_duplicates()
        mat.sort_indices()
        return cls(mat.indptr, mat.indices, mat.data, mat.shape)

    @property
    def nnz(self) -> int:
        return self.vals.size

    def to_dense(self) -> np.ndarray:
        return self._mat.toarray()

    def __repr__(self) -> str:
        return f"SparseCsr(shape={self.shape}, nnz={self.nnz})"


def coo_to_csr(a: SparseCoo) -> SparseCsr:
    """Convert canonical COO to CSR with an identical nonzero map."""
    mat = scipy.sparse.csr_matrix(
        scipy.sparse.coo_matrix((a.vals, (a.rows, a.cols)), shape=a.shape)
    )
    return SparseCsr._from_scipy(mat)


def spmv(a: SparseCsr, x: np.ndarray) -> np.ndarray:
    """Sparse matrix-vector product y = A @ x (sequential row accumulation)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (a.shape[1],):
        raise ValueError(f"dimension mismatch: matrix is {a.shape}, vector is {x.shape}")
    return a._mat @ x


@dataclass
class BlockFactor:
    """LU factorization of a regularized square block A + eps*I.

    The factorization is dense (LAPACK getrf), computed once, and applied via
    triangular solves. Safe to share read-only across workers.
    """

    lu: np.ndarray
    piv: np.ndarray
    epsilon: float
    dim: int

    def apply(self, b: np.ndarray) -> np.ndarray:
        """Return (A + eps*I)^{-1} b."""
        return scipy.linalg.lu_solve((self.lu, self.piv), b, check_finite=False)


def factorize_regularized(a: SparseCoo | SparseCsr, epsilon: float = 0.0) -> BlockFactor:
    """Factorize A + eps*I once so it can be applied as a solve.

    Raises SingularFactorError if a pivot falls below the numerical
    singularity threshold even after regularization.
    """
    m, n = a.shape
    if m != n:
        raise ValueError(f"square matrix required, got {a.shape}")
    dense = a.to_dense()
    if epsilon:
        dense = dense + epsilon * np.eye(n)
    if n == 0:
        return BlockFactor(lu=np.zeros((0, 0)), piv=np.zeros(0, dtype=np.int32),
                           epsilon=float(epsilon), dim=0)
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
        lu, piv = scipy.linalg.lu_factor(dense, check_finite=False)
    diag = np.abs(np.diag(lu))
    scale = max(np.abs(dense).max(), np.finfo(np.float64).tiny)
    if not np.all(np.isfinite(lu)) or diag.min() <= n * np.finfo(np.float64).eps * scale:
        raise SingularFactorError(
            f"block of dim {n} numerically singular (epsilon={epsilon!r})"
        )
    return BlockFactor(lu=lu, piv=piv, epsilon=float(epsilon), dim=n)


@dataclass
class GmresOptions:
    """Restarted-GMRES controls: relative tolerance, Krylov size, cycles."""

    tol: float = 1e-8
    restart: int = 60
    max_outer: int = 10

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if self.restart < 1:
            raise ValueError("restart must be >= 1")
        if self.max_outer < 1:
            raise ValueError("max_outer must be >= 1")


@dataclass
class GmresStats:
    """Solve diagnostics: total inner iterations and the final true residual."""

    iterations: int
    final_relres: float
    converged: bool
    breakdown: bool = False
    residuals: list[float] = field(default_factory=list)


def _check_finite(v: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(v)):
        raise NonFiniteOperatorError(f"{what} produced non-finite values")


def gmres(
    apply_operator: Callable[[np.ndarray], np.ndarray],
    apply_precond: Callable[[np.ndarray], np.ndarray] | None,
    rhs: np.ndarray,
    opts: GmresOptions,
) -> tuple[np.ndarray, GmresStats]:
    """Left-preconditioned restarted GMRES from a zero initial guess.

    Solves M^{-1} A x = M^{-1} b where ``apply_operator`` realizes A and
    ``apply_precond`` realizes M^{-1} (identity when None). Convergence is
    declared on the true preconditioned residual,
    ||M^{-1}(b - A x)||_2 <= tol * ||M^{-1} b||_2, re-evaluated at every
    restart boundary; the per-iteration history in ``stats.residuals``
    tracks the Givens recurrence within each cycle.

    Arnoldi uses modified Gram-Schmidt with a fixed orthogonalization order,
    so identical inputs give bitwise identical results. A vanishing Arnoldi
    norm with the residual still above tolerance is reported via
    ``stats.breakdown``; non-finite operator output raises
    NonFiniteOperatorError.
    """
    rhs = np.asarray(rhs, dtype=np.float64)
    n = rhs.size
    if apply_precond is None:
        apply_precond = lambda v: v  # noqa: E731 - identity preconditioner

    mb = np.asarray(apply_precond(rhs), dtype=np.float64)
    _check_finite(mb, "preconditioner")
    beta0 = float(np.linalg.norm(mb))
    if beta0 == 0.0:
        return np.zeros(n), GmresStats(0, 0.0, True)

    x = np.zeros(n)
    total_iters = 0
    residuals: list[float] = []
    breakdown = False
    converged = False
    relres = 1.0
    m = min(opts.restart, n)

    for cycle in range(opts.max_outer + 1):
        if cycle == 0:
            r = mb.copy()
        else:
            av = np.asarray(apply_operator(x), dtype=np.float64)
            _check_finite(av, "operator")
            r = np.asarray(apply_precond(rhs - av), dtype=np.float64)
            _check_finite(r, "preconditioner")
        beta = float(np.linalg.norm(r))
        relres = beta / beta0
        if relres <= opts.tol:
            converged = True
            break
        if cycle == opts.max_outer or breakdown:
            break

        v = np.empty((m + 1, n))
        h = np.zeros((m + 1, m))
        cs = np.zeros(m)
        sn = np.zeros(m)
        g = np.zeros(m + 1)
        g[0] = beta
        v[0] = r / beta

        k = 0
        for j in range(m):
            av = np.asarray(apply_operator(v[j]), dtype=np.float64)
            _check_finite(av, "operator")
            # copy: the callable may return its input (e.g. identity), and the
            # in-place MGS update below must not touch the Krylov basis
            w = np.array(apply_precond(av), dtype=np.float64)
            _check_finite(w, "preconditioner")
            for i in range(j + 1):
                h[i, j] = v[i] @ w
                w -= h[i, j] * v[i]
            hnorm = float(np.linalg.norm(w))
            h[j + 1, j] = hnorm

            for i in range(j):
                t = cs[i] * h[i, j] + sn[i] * h[i + 1, j]
                h[i + 1, j] = -sn[i] * h[i, j] + cs[i] * h[i + 1, j]
                h[i, j] = t
            denom = float(np.hypot(h[j, j], h[j + 1, j]))
            if denom == 0.0:
                # column contributed nothing: hard Arnoldi breakdown
                breakdown = True
                k = j
                break
            cs[j] = h[j, j] / denom
            sn[j] = h[j + 1, j] / denom
            h[j, j] = denom
            h[j + 1, j] = 0.0
            g[j + 1] = -sn[j] * g[j]
            g[j] = cs[j] * g[j]

            total_iters += 1
            k = j + 1
            rel = abs(g[j + 1]) / beta0
            residuals.append(rel)
            if hnorm <= 1e-14 * beta0:
                if rel > opts.tol:
                    breakdown = True
                break
            if rel <= opts.tol:
                break
            v[j + 1] = w / hnorm

        # least-squares update via back substitution on the rotated H
        y = np.zeros(k)
        for i in range(k - 1, -1, -1):
            y[i] = (g[i] - h[i, i + 1 : k] @ y[i + 1 : k]) / h[i, i]
        x = x + v[:k].T @ y

    return x, GmresStats(
        iterations=total_iters,
        final_relres=float(relres),
        converged=converged,
        breakdown=breakdown,
        residuals=residuals,
    )
