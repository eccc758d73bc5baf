import numpy as np
import pytest
from scipy.integrate import quad

from msgr.basis import (build_basis, eigenpairs_1d, eigenpairs_2d, hermite_functions,
                        kernel_matrix, mse_kernel)
from msgr.data import scale_coordinates
from msgr.errors import InvalidShape


def test_one_dimensional_eigenvalues_match_nystrom():
    a, b = 0.01, 0.5
    x = np.linspace(-35, 35, 2001)
    h = x[1] - x[0]
    ev = np.sort(np.linalg.eigvalsh(mse_kernel(x[:, None, None], x[None, :, None], a, b) * h))[::-1]
    eta = np.array([e.eigenvalue for e in eigenpairs_1d(a, b, 10)])
    np.testing.assert_allclose(ev[:11], eta, rtol=1e-8)


def test_eigenfunctions_are_orthonormal():
    pairs = eigenpairs_1d(0.3, 0.5, 5)
    for m in range(6):
        for n in range(m, 6):
            val = quad(lambda x: pairs[m](x) * pairs[n](x), -40, 40, limit=200)[0]
            assert val == pytest.approx(float(m == n), abs=1e-8)


def test_mercer_reconstruction_one_dimensional():
    # a = b = 0.5 converges fast enough for a pointwise check on [-2, 2]
    a = b = 0.5
    x = np.linspace(-2, 2, 41)
    pairs = eigenpairs_1d(a, b, 10)
    approx = sum(p.eigenvalue * np.outer(p(x), p(x)) for p in pairs)
    exact = mse_kernel(x[:, None, None], x[None, :, None], a, b)
    assert np.abs(approx - exact).max() / exact.max() < 0.01


def test_two_dimensional_ordering_and_size():
    bs = eigenpairs_2d(0.01, 0.5, 10)
    assert bs.L == 66
    assert np.all(np.diff(bs.eigenvalues) <= 0)
    assert bs.pair_indices.sum(axis=1).max() == 10
    assert tuple(bs.pair_indices[0]) == (0, 0)


def test_hermite_recurrence_stays_finite_far_out():
    v = hermite_functions(np.array([-60.0, 0.0, 60.0]), 10, 0.1005)
    assert np.all(np.isfinite(v))


def test_nonpositive_a_rejected():
    with pytest.raises(InvalidShape):
        eigenpairs_1d(0.0, 0.5, 3)


def test_basis_matrix_scaling(small_sim):
    ds, _, _ = small_sim
    sc = scale_coordinates(ds)
    basis = build_basis(sc, 0.01, 0.5, 4)
    f = sc.fovs[0]
    B = basis.basis_matrices[f.fov_id]
    np.testing.assert_allclose(B, basis.eigenfunctions[f.fov_id] * np.sqrt(basis.eigenvalues))
    assert basis.sup_norms[f.fov_id] == pytest.approx(np.abs(B).max())


def test_low_rank_approximation_improves_with_degree(small_sim):
    ds, _, _ = small_sim
    sc = scale_coordinates(ds)
    f = sc.fovs[0]
    Kx = kernel_matrix(f.coordinates, 0.01, 0.5)
    errs = []
    for deg in (4, 8, 12):
        B = build_basis(sc, 0.01, 0.5, deg).basis_matrices[f.fov_id]
        errs.append(np.linalg.norm(B @ B.T - Kx) / np.linalg.norm(Kx))
    assert errs[0] > errs[1] > errs[2]
