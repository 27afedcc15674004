from dataclasses import replace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from fjmpls.funcdata import FunctionalGrid, ImageMatrix, inner_product
from fjmpls.fpca import fpca_fjm_init, fpca_svd
from fjmpls.simbench import ScenarioSpec, TrueParams, calibrate_c0, simulate_dataset


def explicit_eig(X: np.ndarray, cell: float):
    """Eigenpairs of the d x d covariance operator, as functions on the grid."""
    n = X.shape[0]
    Xc = X - X.mean(axis=0)
    lam, V = np.linalg.eigh(cell * Xc.T @ Xc / (n - 1))
    order = np.argsort(lam)[::-1]
    return lam[order], V[:, order].T / np.sqrt(cell)


def sign_align(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return b * np.sign(np.sum(a * b, axis=1))[:, None]


@pytest.mark.parametrize("d,n,seed", [(6, 8, 0), (50, 30, 1), (20, 60, 2), ((5, 4), 15, 3)])
def test_matches_explicit_covariance(d, n, seed):
    rng = np.random.default_rng(seed)
    g = FunctionalGrid(d if isinstance(d, tuple) else (d,))
    X = rng.normal(size=(n, g.d)) * rng.uniform(0.3, 3.0, size=g.d)
    k = min(n - 1, g.d, 6)
    dec = fpca_svd(ImageMatrix(g, X), k)
    lam, phi = explicit_eig(X, g.cell_measure)
    assert_allclose(dec.eigenvalues, lam[:k], rtol=1e-8)
    assert np.max(np.abs(sign_align(dec.eigenfunctions.matrix, phi[:k])
                         - dec.eigenfunctions.matrix)) < 1e-8


def test_orthonormal_and_sorted():
    rng = np.random.default_rng(4)
    g = FunctionalGrid((12, 10))
    dec = fpca_svd(ImageMatrix(g, rng.normal(size=(40, g.d))), 8)
    assert_allclose(dec.eigenfunctions.gram, np.eye(8), atol=1e-8)
    assert np.all(np.diff(dec.eigenvalues) <= 0)
    assert np.all(dec.eigenvalues >= 0)


def test_sign_convention():
    rng = np.random.default_rng(5)
    dec = fpca_svd(ImageMatrix(FunctionalGrid((15,)), rng.normal(size=(10, 15))), 4)
    phi = dec.eigenfunctions.matrix
    assert np.all(phi[np.arange(4), np.argmax(np.abs(phi), axis=1)] > 0)


def test_identical_rows_give_zero_eigenvalues():
    g = FunctionalGrid((5,))
    dec = fpca_svd(ImageMatrix(g, np.tile(np.arange(5.0), (6, 1))), 3)
    assert np.all(dec.eigenvalues == 0)
    assert_allclose(dec.reconstruct(), np.tile(np.arange(5.0), (6, 1)))


def test_rank_one():
    rng = np.random.default_rng(6)
    g = FunctionalGrid((9,))
    pattern = rng.normal(size=9)
    X = np.outer(rng.normal(size=12), pattern) + 3.0
    dec = fpca_svd(ImageMatrix(g, X), 4)
    assert dec.k == 1
    phi = dec.eigenfunctions.matrix[0]
    cos = phi @ pattern / np.sqrt((phi @ phi) * (pattern @ pattern))
    assert abs(cos) == pytest.approx(1.0, abs=1e-10)


def test_reconstruction_error_equals_discarded_eigenvalues():
    rng = np.random.default_rng(7)
    g = FunctionalGrid((25,))
    n = 20
    X = rng.normal(size=(n, 25))
    full = fpca_svd(ImageMatrix(g, X), n - 1)
    for k in (2, 5, 10):
        dec = fpca_svd(ImageMatrix(g, X), k)
        resid = X - dec.reconstruct()
        err = g.cell_measure * np.sum(resid ** 2)
        assert err == pytest.approx(np.sum(full.eigenvalues[k:]) * (n - 1), rel=1e-6)


def test_row_permutation_invariance():
    rng = np.random.default_rng(8)
    g = FunctionalGrid((30,))
    X = rng.normal(size=(15, 30))
    perm = rng.permutation(15)
    a = fpca_svd(ImageMatrix(g, X), 5)
    b = fpca_svd(ImageMatrix(g, X[perm]), 5)
    assert_allclose(a.eigenvalues, b.eigenvalues, rtol=1e-10)
    assert_allclose(a.eigenfunctions.matrix, b.eigenfunctions.matrix, atol=1e-8)
    assert_allclose(a.scores[perm], b.scores, atol=1e-8)


def test_eigenvalue_cutoff_drops_null_directions():
    rng = np.random.default_rng(9)
    X = rng.normal(size=(10, 3)) @ rng.normal(size=(3, 20))
    dec = fpca_svd(ImageMatrix(FunctionalGrid((20,)), X), 8)
    assert dec.k == 3


@pytest.mark.parametrize("k", [0, 11])
def test_k_out_of_range(k):
    with pytest.raises(ValueError):
        fpca_svd(ImageMatrix(FunctionalGrid((10,)), np.ones((12, 10))), k)


def test_needs_two_images():
    with pytest.raises(ValueError):
        fpca_svd(ImageMatrix(FunctionalGrid((3,)), np.ones((1, 3))), 1)


def test_never_forms_d_by_d(monkeypatch):
    import tracemalloc
    g = FunctionalGrid((200, 200))
    X = np.random.default_rng(10).normal(size=(12, g.d))
    tracemalloc.start()
    fpca_svd(ImageMatrix(g, X), 3)
    _, peak = tracemalloc.get_traced_memory()
    tracemalloc.stop()
    assert peak < 40 * g.d * 8


class TestFjmInit:
    def test_null_model_small_coefficients(self):
        # one draw is noisy (about 80 events), so check the median of four
        spec = ScenarioSpec(scenario="custom", n=200, dims=(20, 20),
                            true_params=TrueParams(alpha=0.0))
        c0 = calibrate_c0(spec, n_pilot=20_000)
        norms = []
        for seed in range(4):
            data, _ = simulate_dataset(replace(spec, seed=seed), c0=c0)
            fjm, _, _, _ = fpca_fjm_init(data, 3, 3)
            norms.append((inner_product(fjm.b0, fjm.b0), inner_product(fjm.b1, fjm.b1)))
        assert np.all(np.median(norms, axis=0) < 0.1)

    def test_coefficients_lie_in_eigenfunction_span(self, small_joint):
        data = small_joint[0]
        fjm, reduced, _, (psi, zeta) = fpca_fjm_init(data, 2, 3)
        assert psi.p == 2 and zeta.p == 3
        assert_allclose(fjm.b0.values, psi.expand(reduced.b0_coef).values)
        assert_allclose(fjm.b1.values, zeta.expand(reduced.b1_coef).values)

    def test_survival_only(self, small_joint):
        fjm, reduced, _, (psi, zeta) = fpca_fjm_init(small_joint[0], 0, 2, longitudinal=False)
        assert psi is None and zeta.p == 2
        assert np.all(fjm.b0.values == 0)

    @pytest.mark.parametrize("k0,k1", [(-1, 2), (0, 0)])
    def test_bad_dimensions(self, small_joint, k0, k1):
        with pytest.raises(ValueError):
            fpca_fjm_init(small_joint[0], k0, k1)
