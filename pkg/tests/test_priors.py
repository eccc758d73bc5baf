import numpy as np
import pytest
from scipy.special import ndtr

from msgr.data import FovGeometry, Hyperparams
from msgr.errors import DegenerateInput, InvalidRho
from msgr.priors import (FovPrior, build_fov_correlation, build_prior, estimate_rho_decay,
                         joint_inclusion_prob, marginal_inclusion_prob, morans_i)


def _line_geometry(xs):
    c = np.column_stack([xs, np.zeros(len(xs))])
    return FovGeometry(c, np.abs(np.subtract.outer(xs, xs)))


def test_correlation_entries_and_psd():
    V = build_fov_correlation(_line_geometry(np.array([0.0, 1.0, 2.0])), 0.6)
    np.testing.assert_allclose(V[0], [1, 0.6, 0.36])
    assert np.linalg.eigvalsh(V).min() > 0


def test_regions_zero_out_cross_blocks():
    V = build_fov_correlation(_line_geometry(np.array([0.0, 1.0, 2.0])), 0.6,
                              {0: "a", 1: "a", 2: "b"}, [0, 1, 2])
    assert V[0, 2] == 0 and V[1, 2] == 0 and V[0, 1] == pytest.approx(0.6)


def test_invalid_rho():
    with pytest.raises(InvalidRho):
        build_fov_correlation(_line_geometry(np.array([0.0, 1.0])), 1.0)


@pytest.mark.parametrize("m", [0.0, 1.0, -1.0, 3.0, -3.0])
@pytest.mark.parametrize("s2", [0.0, 1.0, 5.0])
def test_marginal_inclusion_matches_monte_carlo(m, s2):
    rng = np.random.default_rng(7)
    lam = m + np.sqrt(s2) * rng.standard_normal(1_000_000)
    z = lam + rng.standard_normal(lam.size)
    assert abs(marginal_inclusion_prob(m, s2) - (z > 0).mean()) < 0.005


def test_marginal_inclusion_is_half_at_zero_mean():
    assert marginal_inclusion_prob(0.0, 3.7) == 0.5


def test_joint_inclusion_against_independence_and_coupling():
    est, se = joint_inclusion_prob([0.0, 0.0], np.eye(2) * 0.5, n_mc=200_000)
    # independent latents factor into the product of the marginals
    assert abs(est - marginal_inclusion_prob(0, 0.5) ** 2) < 4 * se + 1e-3
    est_c, _ = joint_inclusion_prob([0.0, 0.0], np.full((2, 2), 0.5), n_mc=200_000)
    assert est_c > est


def test_moran_and_rho_estimate():
    W = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], float)
    assert morans_i([1.0, 2.0, 3.0], W) == pytest.approx(0.0)
    with pytest.raises(DegenerateInput):
        morans_i([1.0, 1.0, 1.0], W)


def test_rho_estimate_needs_three_fovs(small_sim):
    ds, _, _ = small_sim
    from msgr.data import SpatialDataset, fov_geometry
    two = SpatialDataset(ds.fovs[:2], ds.gene_names)
    with pytest.raises(DegenerateInput):
        estimate_rho_decay(two, fov_geometry(two))
    r = estimate_rho_decay(ds, fov_geometry(ds))
    assert 0.01 <= r <= 0.99


def test_prior_mean_and_gene_covariance_reduction():
    pr = FovPrior(np.eye(2), 0.02, 0.5, U=np.diag([1.0, 2.0, 4.0]))
    assert pr.prior_mean(0, 3).shape == (2, 2)
    np.testing.assert_allclose(pr.row_precision(3, 1), np.diag([1.0, 0.25]))


def test_build_prior(small_sim):
    from msgr.data import fov_geometry
    ds, _, _ = small_sim
    pr = build_prior(fov_geometry(ds), Hyperparams(), 0.6)
    assert pr.sigma_lambda_sq == pytest.approx(1 / 50)
    assert pr.V.shape == (4, 4)
