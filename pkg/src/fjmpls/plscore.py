"""APLS / RAPLS basis construction for functional linear models.

The empirical covariance operator is never formed. Applying it to a
function ``f`` costs two passes over the image matrix::

    (K f)(t) = n^{-1} sum_i x_i(t) int x_i(s) f(s) ds = X^T (cell * X f) / n

Scalar-covariate adjustment (RAPLS) projects the rows of the design onto
the orthogonal complement of the covariate columns before the Krylov
recursion. Weighted or whitened problems, where the functional design is
``W X`` for an ``N x n`` mixing matrix ``W``, go through the same code with
the ``n x n`` matrix ``W^T M_Z W`` in place of ``M_Z``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg

from .funcdata import DimensionError, FunctionalGrid, FunctionOnGrid, ImageMatrix

logger = logging.getLogger(__name__)

COLLAPSE_TOL = 1e-12
RANK_TOL = 1e-10
SEED_TOL = 1e-13


class RankDeficientError(ValueError):
    """Raised when a scalar design matrix does not have full column rank."""


@dataclass(frozen=True, eq=False)
class BasisSet:
    """``p`` discretized basis functions stored as the rows of a ``p x d`` array."""

    grid: FunctionalGrid
    matrix: np.ndarray
    orthonormalized: bool
    requested_p: int | None = None

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64, ndmin=2)
        if m.shape[1] != self.grid.d:
            raise DimensionError(f"basis rows have length {m.shape[1]}, grid has d={self.grid.d}")
        if m.shape[0] < 1:
            raise ValueError("a basis needs at least one function")
        if np.any(np.linalg.norm(m, axis=1) == 0):
            raise ValueError("basis contains the zero function")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)
        if self.requested_p is None:
            object.__setattr__(self, "requested_p", m.shape[0])

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    @property
    def functions(self) -> tuple[FunctionOnGrid, ...]:
        return tuple(FunctionOnGrid(self.grid, row) for row in self.matrix)

    @property
    def gram(self) -> np.ndarray:
        return self.grid.cell_measure * (self.matrix @ self.matrix.T)

    def scores(self, X: ImageMatrix) -> np.ndarray:
        """``n x p`` matrix of ``int x_i(s) f_j(s) ds``."""
        X.grid.check_same(self.grid)
        return self.grid.cell_measure * (X.values @ self.matrix.T)

    def expand(self, coef) -> FunctionOnGrid:
        coef = np.asarray(coef, dtype=np.float64)
        if coef.shape != (self.p,):
            raise DimensionError(f"need {self.p} coefficients, got shape {coef.shape}")
        return FunctionOnGrid(self.grid, coef @ self.matrix)

    def project(self, f: FunctionOnGrid) -> np.ndarray:
        """Coefficients of the L2 projection of ``f`` onto the span of the basis."""
        self.grid.check_same(f.grid)
        rhs = self.grid.cell_measure * (self.matrix @ f.values)
        if self.orthonormalized:
            return rhs
        return np.linalg.solve(self.gram, rhs)


@dataclass(frozen=True, eq=False)
class RaplsFit:
    basis: BasisSet
    t_hat: np.ndarray
    alpha_hat: np.ndarray
    b_hat: FunctionOnGrid
    rss: float


def orthonormalize(vectors: np.ndarray, cell_measure: float, tol: float = COLLAPSE_TOL) -> np.ndarray:
    """Modified Gram-Schmidt (two passes) under ``<f, g> = cell * f @ g``.

    Rows are processed in order, so the span of the first ``j`` outputs equals
    the span of the first ``j`` inputs. Rows that are numerically dependent on
    their predecessors are dropped.
    """
    out = []
    for v in np.array(vectors, dtype=np.float64, ndmin=2):
        w = v.copy()
        ref = np.sqrt(cell_measure * (w @ w))
        for _ in range(2):
            for q in out:
                w -= cell_measure * (q @ w) * q
        nrm = np.sqrt(cell_measure * (w @ w))
        if ref == 0 or nrm <= tol * ref:
            continue
        out.append(w / nrm)
    return np.array(out).reshape(len(out), -1)


def _krylov(X: np.ndarray, cell: float, seed: np.ndarray,
            mix: Callable[[np.ndarray], np.ndarray], nrows: int, p: int,
            orthonormalize_basis: bool, seed_scale: float) -> tuple[np.ndarray, bool]:
    """Krylov sequence ``seed, K seed, K^2 seed, ...`` with ``K f = X^T mix(cell X f) / nrows``.

    With ``orthonormalize_basis`` the operator is applied to the latest
    orthonormalized vector (Arnoldi form). That spans the same nested spaces
    as orthonormalizing the raw sequence by MGS but stays accurate when the
    raw vectors become nearly parallel.
    """
    def op(f):
        return X.T @ mix(cell * (X @ f)) / nrows

    # seed_scale bounds the seed norm; a seed below round-off of it is zero
    if np.linalg.norm(seed) <= SEED_TOL * seed_scale:
        raise ValueError("the Krylov seed is the zero function (response uncorrelated with images)")
    collapsed = False
    if not orthonormalize_basis:
        raw = [seed]
        for _ in range(p - 1):
            raw.append(op(raw[-1]))
        raw = np.array(raw)
        norms = np.sqrt(cell * np.einsum("ij,ij->i", raw, raw))
        small = np.nonzero(norms < COLLAPSE_TOL * norms[0])[0]
        if small.size:
            raw, collapsed = raw[:small[0]], True
        return raw, collapsed

    qs = [seed / np.sqrt(cell * (seed @ seed))]
    while len(qs) < p:
        w = op(qs[-1])
        ref = np.sqrt(cell * (w @ w))
        for _ in range(2):
            for q in qs:
                w -= cell * (q @ w) * q
        nrm = np.sqrt(cell * (w @ w))
        if ref == 0 or nrm <= COLLAPSE_TOL * ref:
            collapsed = True
            break
        qs.append(w / nrm)
    return np.array(qs), collapsed


def _as_basis(grid, vectors, orthonormal, p, collapsed) -> BasisSet:
    if collapsed:
        logger.info("Krylov basis collapsed: effective p=%d of requested %d", len(vectors), p)
    return BasisSet(grid, vectors, orthonormal, requested_p=p)


def apls_seed(Xc: ImageMatrix, yc) -> FunctionOnGrid:
    """Empirical ``K(b)``: ``n^{-1} sum_i (x_i - xbar)(y_i - ybar)`` for centered inputs."""
    yc = np.asarray(yc, dtype=np.float64)
    if yc.shape != (Xc.n,):
        raise DimensionError(f"response has shape {yc.shape}, images have n={Xc.n}")
    if Xc.n < 2:
        raise ValueError("need at least two subjects")
    return FunctionOnGrid(Xc.grid, Xc.values.T @ yc / Xc.n)


def apls_basis(Xc: ImageMatrix, yc, p: int, orthonormalize_basis: bool = True) -> BasisSet:
    """First ``p`` APLS basis functions ``K(b), ..., K^p(b)`` from centered data."""
    if p < 1:
        raise ValueError("p must be at least 1")
    seed = apls_seed(Xc, yc).values
    seed_scale = np.linalg.norm(Xc.values) * np.linalg.norm(yc) / Xc.n
    vecs, collapsed = _krylov(Xc.values, Xc.grid.cell_measure, seed, lambda v: v, Xc.n, p,
                              orthonormalize_basis, seed_scale)
    return _as_basis(Xc.grid, vecs, orthonormalize_basis, p, collapsed)


def _column_basis(Z: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``col(Z)``; raises naming the first dependent column."""
    if Z.shape[1] == 0:
        return np.zeros((Z.shape[0], 0))
    Q, R = scipy.linalg.qr(Z, mode="economic")
    diag = np.abs(np.diag(R))
    scale = max(np.linalg.norm(Z, axis=0).max(), np.finfo(float).tiny)
    bad = np.nonzero(diag <= RANK_TOL * scale)[0]
    if bad.size:
        raise RankDeficientError(
            f"scalar design is rank deficient: column {int(bad[0])} is linearly dependent "
            "on the preceding columns")
    return Q


def residual_projector(Z) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``v -> M_Z v`` with ``M_Z = I - Z (Z^T Z)^{-1} Z^T`` (via QR)."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    Q = _column_basis(Z)

    def apply(v):
        return v - Q @ (Q.T @ v)
    return apply


def rapls_residualize(X: ImageMatrix, Z, y) -> tuple[ImageMatrix, np.ndarray]:
    """``(M_Z X, M_Z y)``; columns of both are orthogonal to ``col(Z)``."""
    Z = np.asarray(Z, dtype=np.float64).reshape(X.n, -1)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.n,):
        raise DimensionError(f"response has shape {y.shape}, images have n={X.n}")
    M = residual_projector(Z)
    return ImageMatrix(X.grid, M(X.values)), M(y)


def rapls_basis_stacked(X: ImageMatrix, W, Zw, yw, p: int,
                        orthonormalize_basis: bool = True) -> BasisSet:
    """RAPLS basis for the stacked system ``yw = Zw a + (W X) b + e``.

    ``W`` is the ``N x n`` matrix mapping subject images to design rows
    (``None`` means the identity), ``Zw`` the ``N x q`` scalar design and
    ``yw`` the length-``N`` response. Only ``n x n`` and ``N x n`` arrays
    are formed.
    """
    if p < 1:
        raise ValueError("p must be at least 1")
    yw = np.asarray(yw, dtype=np.float64)
    N = yw.shape[0]
    Zw = np.asarray(Zw, dtype=np.float64).reshape(N, -1)
    M = residual_projector(Zw)
    if W is None:
        if N != X.n:
            raise DimensionError("without a mixing matrix the response needs one row per image")
        g = M(yw)

        def mix(v):
            return M(v)
    else:
        W = np.asarray(W, dtype=np.float64)
        if W.shape != (N, X.n):
            raise DimensionError(f"mixing matrix must be {N} x {X.n}, got {W.shape}")
        g = W.T @ M(yw)

        def mix(v):
            return W.T @ M(W @ v)
    seed = X.values.T @ g / N
    w_norm = 1.0 if W is None else np.linalg.norm(W, 2)
    seed_scale = np.linalg.norm(X.values) * w_norm * np.linalg.norm(yw) / N
    vecs, collapsed = _krylov(X.values, X.grid.cell_measure, seed, mix, N, p, orthonormalize_basis,
                              seed_scale)
    return _as_basis(X.grid, vecs, orthonormalize_basis, p, collapsed)


def rapls_basis(X: ImageMatrix, Z, y, p: int, orthonormalize_basis: bool = True) -> BasisSet:
    """First ``p`` RAPLS basis functions after projecting out the columns of ``Z``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape != (X.n,):
        raise DimensionError(f"response has shape {y.shape}, images have n={X.n}")
    return rapls_basis_stacked(X, None, Z, y, p, orthonormalize_basis)


def rapls_fit(X: ImageMatrix, Z, y, p: int) -> RaplsFit:
    """Least-squares fit of ``y = Z alpha + int x b + e`` on ``p`` RAPLS directions."""
    Z = np.asarray(Z, dtype=np.float64).reshape(X.n, -1)
    y = np.asarray(y, dtype=np.float64)
    basis = rapls_basis(X, Z, y, p)
    M = residual_projector(Z)
    y_perp = M(y)
    S = M(basis.scores(X))
    _, R = np.linalg.qr(S)
    diag = np.abs(np.diag(R))
    ok = diag > RANK_TOL * max(diag.max(), np.finfo(float).tiny)
    if not ok.all():
        keep = int(np.argmin(ok))
        warnings.warn(f"score matrix is rank deficient; reducing p from {basis.p} to {keep}")
        basis = BasisSet(basis.grid, basis.matrix[:keep], basis.orthonormalized, basis.requested_p)
        S = S[:, :keep]
    t_hat, *_ = np.linalg.lstsq(S, y_perp, rcond=None)
    b_hat = basis.expand(t_hat)
    resid_full = y - X.grid.cell_measure * (X.values @ b_hat.values)
    alpha_hat, *_ = np.linalg.lstsq(Z, resid_full, rcond=None)
    rss = float(np.sum((y_perp - S @ t_hat) ** 2))
    return RaplsFit(basis, t_hat, alpha_hat, b_hat, rss)
