"""SVD-based functional principal component analysis for large images.

The decomposition goes through the ``n x n`` Gram matrix of the centered
images, so memory stays linear in the number of pixels ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .funcdata import FjmDataset, FunctionOnGrid, ImageMatrix
from .plscore import BasisSet

EIGEN_CUTOFF = 1e-10


@dataclass(frozen=True, eq=False)
class FpcaDecomposition:
    eigenfunctions: BasisSet
    eigenvalues: np.ndarray
    scores: np.ndarray
    mean_function: FunctionOnGrid

    @property
    def k(self) -> int:
        return len(self.eigenvalues)

    def reconstruct(self) -> np.ndarray:
        return self.mean_function.values + self.scores @ self.eigenfunctions.matrix


def fpca_svd(X: ImageMatrix, k: int) -> FpcaDecomposition:
    """Top ``k`` eigenfunctions of the sample covariance operator of ``X``.

    Eigenvalues are those of ``f -> (n-1)^{-1} sum_i xc_i <xc_i, f>`` with the
    grid inner product, eigenfunctions are orthonormal under the same inner
    product and signed so that their largest-magnitude entry is positive.
    Components whose eigenvalue falls below ``1e-10`` times the largest are
    dropped, so fewer than ``k`` may be returned. If every eigenvalue is zero
    (identical images) a single zero-eigenvalue component is kept so callers
    still get a valid basis.
    """
    n, d = X.values.shape
    if n < 2:
        raise ValueError("FPCA needs at least two images")
    if not 1 <= k <= min(n, d):
        raise ValueError(f"k must lie in [1, min(n, d)] = [1, {min(n, d)}], got {k}")
    cell = X.grid.cell_measure
    mean = X.values.mean(axis=0)
    Xc = X.values - mean
    gram = cell * (Xc @ Xc.T)
    lam, U = np.linalg.eigh(gram)
    order = np.argsort(lam)[::-1][:k]
    lam, U = np.clip(lam[order], 0.0, None), U[:, order]
    keep = lam > EIGEN_CUTOFF * lam[0] if lam[0] > 0 else np.zeros(len(lam), bool)
    if not keep.any():
        # all-zero covariance: fall back to an arbitrary unit function
        phi = np.zeros((1, d))
        phi[0, 0] = 1.0 / np.sqrt(cell)
        return FpcaDecomposition(BasisSet(X.grid, phi, True, requested_p=k), np.zeros(1),
                                 np.zeros((n, 1)), FunctionOnGrid(X.grid, mean))
    lam, U = lam[keep], U[:, keep]
    sv = np.sqrt(lam)
    phi = (Xc.T @ U / sv).T
    # one pass of re-orthonormalization guards against Gram-matrix rounding
    q, r = np.linalg.qr(np.sqrt(cell) * phi.T)
    phi = (q * np.sign(np.diag(r))).T / np.sqrt(cell)
    idx = np.argmax(np.abs(phi), axis=1)
    signs = np.sign(phi[np.arange(len(phi)), idx])
    phi *= signs[:, None]
    scores = cell * (Xc @ phi.T)
    return FpcaDecomposition(
        eigenfunctions=BasisSet(X.grid, phi, True, requested_p=k),
        eigenvalues=lam / (n - 1),
        scores=scores,
        mean_function=FunctionOnGrid(X.grid, mean),
    )


def fpca_fjm_init(dataset: FjmDataset, k0: int, k1: int, em_config=None,
                  decomposition: FpcaDecomposition | None = None, longitudinal: bool = True):
    """FPCA estimator of the functional joint model.

    Images are projected onto the leading ``k0`` (longitudinal) and ``k1``
    (survival) eigenfunctions and the reduced joint model is fitted by EM.
    ``k0 = 0`` or ``k1 = 0`` drops the image from that submodel and
    ``longitudinal=False`` fits the survival submodel alone. Returns the
    functional parameters, the reduced parameters, the EM trace and the two
    bases.
    """
    from .jointmodel import EmConfig, ReducedDesign, em_fit, initial_params

    if k0 < 0 or k1 < 0 or k0 + k1 == 0:
        raise ValueError("need k0, k1 >= 0 with at least one positive")
    if not longitudinal and k0:
        raise ValueError("k0 must be 0 without the longitudinal submodel")
    em_config = em_config or EmConfig()
    dec = decomposition or fpca_svd(dataset.images, max(k0, k1))
    k0 = min(k0, dec.k)
    k1 = min(k1, dec.k)
    basis = dec.eigenfunctions
    psi = BasisSet(basis.grid, basis.matrix[:k0], True) if k0 else None
    zeta = BasisSet(basis.grid, basis.matrix[:k1], True) if k1 else None
    design = ReducedDesign.from_bases(dataset, psi, zeta, longitudinal)
    init = initial_params(design)
    reduced, trace = em_fit(design, init, em_config)
    return reduced.to_functional(psi, zeta, dataset.grid), reduced, trace, (psi, zeta)
