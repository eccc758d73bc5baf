"""Macro-level FOV correlation and the structured edge-selection prior."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

from .errors import DegenerateInput, InvalidRho, SingularPrior

PSD_JITTER = 1e-8


@dataclass
class FovPrior:
    """Prior of the latent selection variables.

    Each latent K-vector has prior covariance ``sigma_lambda_sq * U[j, j] * V``;
    ``M`` is either a scalar or a ``(p, K, p)`` array indexed by
    (response node, FOV, predictor), the diagonal being ignored.
    """

    V: np.ndarray
    sigma_lambda_sq: float
    M: float | np.ndarray = 0.0
    U: np.ndarray | None = None

    def prior_mean(self, i: int, p: int) -> np.ndarray:
        """K x (p-1) prior mean for the regression of node ``i``."""
        K = self.V.shape[0]
        others = [j for j in range(p) if j != i]
        M = np.asarray(self.M, dtype=float)
        if M.ndim == 0:
            return np.full((K, p - 1), float(M))
        if M.shape == (K, p - 1):
            return M.copy()
        return M[i][:, others]

    def row_precision(self, p: int, i: int | None = None) -> np.ndarray:
        """Inverse of the (p-1) x (p-1) gene covariance seen by node ``i``.

        ``U`` may be given over all p genes (row and column ``i`` are dropped)
        or directly over the p-1 predictors. Identity when unset.
        """
        if self.U is None:
            return np.eye(p - 1)
        Umat = np.asarray(self.U, dtype=float)
        if Umat.shape == (p, p):
            if i is None:
                raise ValueError("node index needed to reduce a p x p gene covariance")
            keep = [j for j in range(p) if j != i]
            Umat = Umat[np.ix_(keep, keep)]
        return np.linalg.inv(Umat)


def _repair_psd(V: np.ndarray) -> np.ndarray:
    lam_min = np.linalg.eigvalsh(V).min()
    if lam_min >= 0:
        return V
    V = V + (-lam_min + PSD_JITTER) * np.eye(V.shape[0])
    d = 1.0 / np.sqrt(np.diag(V))
    return V * d[:, None] * d[None, :]


def build_fov_correlation(geometry, rho_decay: float, region_labels=None,
                          fov_ids=None) -> np.ndarray:
    """``V[k, k'] = rho_decay ** d_kk'``, zeroed across regions.

    ``region_labels`` maps FOV id to region; ``fov_ids`` gives the id of each
    row of the geometry (defaults to 0..K-1 order lookup by position).
    """
    if not (0.0 < rho_decay < 1.0):
        raise InvalidRho(f"rho_decay must lie in (0, 1), got {rho_decay}")
    D = np.asarray(geometry.distances, dtype=float)
    V = rho_decay ** D
    if region_labels is not None:
        ids = list(fov_ids) if fov_ids is not None else list(range(D.shape[0]))
        reg = np.array([region_labels.get(f) for f in ids], dtype=object)
        V = np.where(reg[:, None] == reg[None, :], V, 0.0)
    np.fill_diagonal(V, 1.0)
    V = 0.5 * (V + V.T)
    return _repair_psd(V)


def morans_i(values, weights) -> float:
    x = np.asarray(values, dtype=float)
    W = np.array(weights, dtype=float)
    np.fill_diagonal(W, 0.0)
    z = x - x.mean()
    denom = (z ** 2).sum()
    if not denom > 0:
        raise DegenerateInput("Moran's I is undefined for constant values")
    return float(len(x) / W.sum() * (z @ W @ z) / denom)


def estimate_rho_decay(dataset, geometry, bandwidth: float = 1.0) -> float:
    """Spatial decay estimated as Moran's I of per-FOV mean expression.

    Gaussian-kernel weights ``exp(-d^2 / (2 bandwidth^2))``; the result is
    clamped to [0.01, 0.99] so it stays a usable decay parameter.
    """
    if dataset.K < 3:
        raise DegenerateInput(f"need at least 3 FOVs to estimate rho_decay, got {dataset.K}")
    means = np.array([f.expression.mean() for f in dataset.fovs])
    if np.ptp(means) == 0:
        raise DegenerateInput("per-FOV mean expression is constant")
    W = np.exp(-geometry.distances ** 2 / (2.0 * bandwidth ** 2))
    return float(np.clip(morans_i(means, W), 0.01, 0.99))


def marginal_inclusion_prob(m, sigma_sq):
    """Prior probability that an edge is selected, ``Phi(m / sqrt(sigma_sq + 1))``."""
    return ndtr(np.asarray(m, dtype=float) / np.sqrt(np.asarray(sigma_sq, dtype=float) + 1.0))


def joint_inclusion_prob(mean, cov, n_mc: int = 100_000, seed=0) -> tuple[float, float]:
    """Monte-Carlo estimate of ``E[Phi(l1) Phi(l2)]`` for ``(l1, l2) ~ N(mean, cov)``.

    Returns the estimate and its standard error.
    """
    rng = np.random.default_rng(seed)
    draws = rng.multivariate_normal(np.asarray(mean, dtype=float),
                                    np.asarray(cov, dtype=float), size=n_mc, method="eigh")
    vals = ndtr(draws[:, 0]) * ndtr(draws[:, 1])
    return float(vals.mean()), float(vals.std(ddof=1) / np.sqrt(n_mc))


def build_prior(geometry, hyperparams, rho_decay: float, region_labels=None,
                fov_ids=None) -> FovPrior:
    V = build_fov_correlation(geometry, rho_decay, region_labels, fov_ids)
    try:
        np.linalg.cholesky(V)
    except np.linalg.LinAlgError:
        raise SingularPrior("FOV correlation matrix is not positive definite") from None
    return FovPrior(V, hyperparams.sigma_lambda_sq, hyperparams.prior_mean_M, hyperparams.prior_U)
