"""
Dense kernels for regularized least squares when n << p.

Everything here works with the pair (A, R'R). The whitened operator A R^-1 is
never formed; the small n x n matrix

    B = I_n + alpha^-1 A (R'R)^-1 A'

carries both the quadratic energy term u'B^-1 u and the log-determinant
log det(I_p + alpha^-1 R^-T A'A R^-1) = log det B.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.linalg import blas
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, FactorizationFailure, NonConvergence

CG_TOL = 1e-10
CG_ITER_FACTOR = 50


@dataclass(frozen=True)
class ForwardOperator:
    """Linear map g -> A g backed by a dense n x p coefficient table."""

    dense_rows: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.dense_rows, dtype=float)
        if a.ndim != 2 or min(a.shape) < 1:
            raise DimensionMismatch(f"forward operator needs a 2-D nonempty array, got shape {a.shape}")
        a.setflags(write=False)
        object.__setattr__(self, "dense_rows", a)

    @property
    def n(self) -> int:
        return self.dense_rows.shape[0]

    @property
    def p(self) -> int:
        return self.dense_rows.shape[1]

    def apply(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.p:
            raise DimensionMismatch(f"expected length {self.p}, got {g.shape[0]}")
        return self.dense_rows @ g

    def apply_transpose(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.n:
            raise DimensionMismatch(f"expected length {self.n}, got {v.shape[0]}")
        return self.dense_rows.T @ v


class RegularizerGram:
    """The SPD matrix R'R, with a factorization cached at construction.

    Pass ``matrix=None`` for the identity fast path. Sparse input is factored
    with a sparse LU, dense input with a Cholesky.
    """

    def __init__(self, p: int, matrix=None):
        self.p = int(p)
        if self.p < 1:
            raise DimensionMismatch("p must be >= 1")
        self.is_identity = matrix is None
        self._matrix = None
        self._lu = None
        self._cho = None
        if matrix is None:
            return
        if matrix.shape != (self.p, self.p):
            raise DimensionMismatch(f"gram must be {self.p}x{self.p}, got {matrix.shape}")
        if sp.issparse(matrix):
            self._matrix = sp.csc_matrix(matrix, dtype=float)
            self._lu = spla.splu(self._matrix)
        else:
            self._matrix = np.array(matrix, dtype=float)
            self._cho = sla.cho_factor(self._matrix, lower=True)

    @classmethod
    def identity(cls, p: int) -> "RegularizerGram":
        return cls(p)

    def apply_gram(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.p:
            raise DimensionMismatch(f"expected length {self.p}, got {g.shape[0]}")
        if self.is_identity:
            return g.copy()
        return self._matrix @ g

    def solve(self, x):
        """Return (R'R)^-1 x for a vector or a p x k block."""
        x = np.asarray(x, dtype=float)
        if self.is_identity:
            return x.copy()
        if self._lu is not None:
            return self._lu.solve(x)
        return sla.cho_solve(self._cho, x)

    def dense(self) -> np.ndarray:
        if self.is_identity:
            return np.eye(self.p)
        if sp.issparse(self._matrix):
            return self._matrix.toarray()
        return self._matrix.copy()

    def whiten_rows(self, a):
        """Rows of a matrix W with W W' = a (R'R)^-1 a', or None if not cheaper than a solve."""
        return None


class KroneckerSumGram(RegularizerGram):
    """R'R = I (x) C + C (x) I for a small SPD block C of size k (p = k^2).

    One eigendecomposition C = V diag(lam) V' diagonalizes the whole matrix,
    so solves cost two k x k x k products per vector. Vectors are indexed with
    the second Kronecker factor varying fastest.
    """

    def __init__(self, block):
        block = np.asarray(block, dtype=float)
        k = block.shape[0]
        super().__init__(k * k, None)
        self.is_identity = False
        self.k = k
        self.block = block
        lam, self._v = np.linalg.eigh(0.5 * (block + block.T))
        if lam[0] <= 0:
            raise ValueError("Kronecker block must be positive definite")
        self._eig = lam[:, None] + lam[None, :]
        self._inv_sqrt = 1.0 / np.sqrt(self._eig)
        eye = sp.identity(k, format="csr")
        cb = sp.csr_matrix(block)
        self._matrix = (sp.kron(eye, cb) + sp.kron(cb, eye)).tocsr()

    def apply_gram(self, g):
        g = np.asarray(g, dtype=float)
        if g.shape[0] != self.p:
            raise DimensionMismatch(f"expected length {self.p}, got {g.shape[0]}")
        return self._matrix @ g

    def _to_basis(self, x):
        # x: (..., k, k) -> V' x V
        return np.matmul(np.matmul(self._v.T, x), self._v)

    def _from_basis(self, y):
        return np.matmul(np.matmul(self._v, y), self._v.T)

    def solve(self, x):
        x = np.asarray(x, dtype=float)
        k = self.k
        if x.ndim == 1:
            y = self._to_basis(x.reshape(k, k)) / self._eig
            return self._from_basis(y).ravel()
        cols = np.moveaxis(x, -1, 0).reshape(-1, k, k)
        y = self._to_basis(cols) / self._eig
        return np.moveaxis(self._from_basis(y).reshape(x.shape[1], self.p), 0, -1)

    def whiten_rows(self, a):
        a = np.asarray(a, dtype=float)
        k, rows = self.k, a.shape[0]
        # V' X V for every row X, as two tall GEMMs
        y = (a.reshape(rows * k, k) @ self._v).reshape(rows, k, k)
        y = (y.transpose(0, 2, 1).reshape(rows * k, k) @ self._v).reshape(rows, k, k)
        y = y.transpose(0, 2, 1) * self._inv_sqrt
        return y.reshape(rows, self.p)


def small_kernel(op: ForwardOperator, gram: RegularizerGram) -> np.ndarray:
    """A (R'R)^-1 A', the alpha-independent part of B."""
    a = op.dense_rows
    if gram.p != op.p:
        raise DimensionMismatch(f"operator has p={op.p} but gram has p={gram.p}")
    if gram.is_identity:
        return _gram_rows(a)
    w = gram.whiten_rows(a)
    if w is not None:
        return _gram_rows(w)
    k = a @ gram.solve(a.T)
    return 0.5 * (k + k.T)


def _gram_rows(w):
    """w w' via SYRK, symmetrized."""
    # w.T is Fortran-ordered, so BLAS reads it without a copy
    k = blas.dsyrk(1.0, np.asarray(w, dtype=float).T, trans=1, lower=1)
    return np.tril(k) + np.tril(k, -1).T


@dataclass
class LowRankFactor:
    """Cholesky factor of B = I_n + alpha^-1 K with K = A (R'R)^-1 A'."""

    alpha: float
    chol_small: np.ndarray
    logdet_small: float
    m_param: Optional[np.ndarray] = None
    jittered: bool = field(default=False)

    @classmethod
    def from_kernel(cls, kernel: np.ndarray, alpha: float, m_param=None) -> "LowRankFactor":
        if not alpha > 0:
            raise ValueError(f"alpha must be positive, got {alpha}")
        n = kernel.shape[0]
        b = kernel / alpha
        b[np.diag_indices(n)] += 1.0
        if not np.isfinite(b.sum()):
            raise FactorizationFailure("small system has non-finite entries")
        jittered = False
        try:
            chol = sla.cholesky(b, lower=True, check_finite=False)
        except sla.LinAlgError:
            b[np.diag_indices(n)] += 1e-12 * np.trace(b) / n
            jittered = True
            try:
                chol = sla.cholesky(b, lower=True, check_finite=False)
            except sla.LinAlgError as exc:
                raise FactorizationFailure(f"Cholesky of the {n}x{n} system failed: {exc}") from exc
        diag = np.diag(chol)
        if not np.all(diag > 0):
            raise FactorizationFailure("non-positive pivot in the small Cholesky factor")
        logdet = 2.0 * float(np.sum(np.log(diag)))
        return cls(alpha=float(alpha), chol_small=chol, logdet_small=logdet,
                   m_param=None if m_param is None else np.asarray(m_param, dtype=float),
                   jittered=jittered)

    @classmethod
    def build(cls, op: ForwardOperator, gram: RegularizerGram, alpha: float, m_param=None):
        return cls.from_kernel(small_kernel(op, gram), alpha, m_param=m_param)

    @property
    def n(self) -> int:
        return self.chol_small.shape[0]

    def solve(self, u):
        """B^-1 u."""
        return sla.cho_solve((self.chol_small, True), np.asarray(u, dtype=float), check_finite=False)

    def quad(self, u) -> float:
        """u' B^-1 u, computed as the squared norm of L^-1 u."""
        y = sla.solve_triangular(self.chol_small, np.asarray(u, dtype=float), lower=True,
                                 check_finite=False)
        return float(y @ y)


def _check_data(op: ForwardOperator, u):
    u = np.asarray(u, dtype=float)
    if u.ndim != 1 or u.shape[0] != op.n:
        raise DimensionMismatch(f"data has shape {u.shape}, operator has n={op.n}")
    if not np.all(np.isfinite(u)):
        raise ValueError("data vector contains non-finite values")
    return u


def apply_normal(op: ForwardOperator, gram: RegularizerGram, alpha: float, g):
    """g -> (A'A + alpha R'R) g without forming A'A."""
    g = np.asarray(g, dtype=float)
    if g.shape[0] != op.p:
        raise DimensionMismatch(f"expected length {op.p}, got {g.shape[0]}")
    return op.apply_transpose(op.apply(g)) + alpha * gram.apply_gram(g)


# name used by the iterative solver docs
apply_gram_whitened = apply_normal


def woodbury_solution(op, gram, alpha, u, factor: Optional[LowRankFactor] = None):
    """g_min = alpha^-1 (R'R)^-1 A' B^-1 u, the direct n x n route."""
    u = _check_data(op, u)
    if factor is None:
        factor = LowRankFactor.build(op, gram, alpha)
    return gram.solve(op.apply_transpose(factor.solve(u))) / alpha


def solve_regularized(op: ForwardOperator, gram: RegularizerGram, alpha: float, u,
                      tol: float = CG_TOL, maxiter: Optional[int] = None,
                      factor: Optional[LowRankFactor] = None, warm_start: bool = True):
    """Minimizer of ||A g - u||^2 + alpha ||R g||^2.

    Conjugate gradients on the normal equations, stopped at relative residual
    ``tol``. By default CG starts from the direct n x n solution, so on
    well-posed systems it only has to confirm the residual.
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    u = _check_data(op, u)
    rhs = op.apply_transpose(u)
    rhs_norm = np.linalg.norm(rhs)
    if rhs_norm == 0.0:
        return np.zeros(op.p)
    if maxiter is None:
        maxiter = CG_ITER_FACTOR * op.p

    x0 = None
    if warm_start:
        try:
            x0 = woodbury_solution(op, gram, alpha, u, factor=factor)
        except FactorizationFailure:
            x0 = None
    if x0 is not None:
        res = np.linalg.norm(apply_normal(op, gram, alpha, x0) - rhs)
        if res <= tol * rhs_norm:
            return x0

    normal = spla.LinearOperator((op.p, op.p), matvec=lambda g: apply_normal(op, gram, alpha, g),
                                 dtype=float)
    g, info = spla.cg(normal, rhs, x0=x0, rtol=tol, atol=0.0, maxiter=maxiter)
    res = np.linalg.norm(apply_normal(op, gram, alpha, g) - rhs)
    if info != 0 or res > tol * rhs_norm:
        raise NonConvergence(
            f"CG stopped with relative residual {res / rhs_norm:.3e} after cap {maxiter}")
    return g


def regularized_energy(op, gram, alpha, u, g) -> float:
    """||u - A g||^2 + alpha <g, R'R g>."""
    r = np.asarray(u, dtype=float) - op.apply(g)
    return float(r @ r + alpha * (g @ gram.apply_gram(g)))


def misfit_quadratic(op: ForwardOperator, gram: RegularizerGram, alpha: float, u,
                     factor: Optional[LowRankFactor] = None) -> float:
    """u' B^-1 u, which equals the regularized energy at g_min."""
    u = _check_data(op, u)
    if factor is None:
        factor = LowRankFactor.build(op, gram, alpha)
    return factor.quad(u)


def logdet_term(op: ForwardOperator, gram: RegularizerGram, alpha: float,
                factor: Optional[LowRankFactor] = None) -> float:
    """log det(I_p + alpha^-1 R^-T A'A R^-1), evaluated as log det B."""
    if factor is None:
        factor = LowRankFactor.build(op, gram, alpha)
    return factor.logdet_small
