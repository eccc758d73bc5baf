"""Closed-form coordinate-ascent updates of the augmented variational family.

These are the reference implementations: small, dense and direct. The
engine uses algebraically identical fast paths and is tested against them.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cho_factor, cho_solve, LinAlgError
from scipy.special import log_ndtr, ndtr

from .errors import CholeskyFailure, NonPositiveRate, SingularPrior

MILLS_SWITCH = 10.0
P_CLAMP = 1e-12
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


def logit_phi_stable(x):
    """``log(Phi(x) / (1 - Phi(x)))`` with Mills-ratio asymptotics for ``|x| >= 10``.

    Computed on ``|x|`` and sign-flipped, so the result is exactly odd.
    """
    x = np.asarray(x, dtype=float)
    ax = np.abs(x)
    with np.errstate(divide="ignore"):
        tail = _HALF_LOG_2PI + np.log(np.maximum(ax, MILLS_SWITCH)) + 0.5 * ax * ax
    direct = log_ndtr(np.minimum(ax, MILLS_SWITCH)) - log_ndtr(-np.minimum(ax, MILLS_SWITCH))
    out = np.sign(x) * np.where(ax >= MILLS_SWITCH, tail, direct)
    return out if out.ndim else float(out)


def _inv_mills_pair(x):
    """Return ``phi(x)/Phi(x)`` and ``phi(x)/(1-Phi(x))`` with the large-|x| limits."""
    x = np.asarray(x, dtype=float)
    logpdf = -0.5 * x * x - _HALF_LOG_2PI
    upper = np.exp(logpdf - log_ndtr(x))
    lower = np.exp(logpdf - log_ndtr(-x))
    upper = np.where(x >= MILLS_SWITCH, 0.0, np.where(x <= -MILLS_SWITCH, -x, upper))
    lower = np.where(x >= MILLS_SWITCH, x, np.where(x <= -MILLS_SWITCH, 0.0, lower))
    return upper, lower


def expected_z(lambda_mean, p):
    """Mean of ``p * TN(lambda, 1, 0, inf) + (1 - p) * TN(lambda, 1, -inf, 0)``."""
    upper, lower = _inv_mills_pair(lambda_mean)
    out = np.asarray(lambda_mean, dtype=float) + p * upper - (1.0 - np.asarray(p)) * lower
    return out if np.ndim(out) else float(out)


def damp(new, old, learning_rate: float):
    """Convex relaxation ``lr * new + (1 - lr) * old``."""
    return learning_rate * np.asarray(new) + (1.0 - learning_rate) * np.asarray(old)


def expected_sq_norm(y, H, mu, Sigma, p) -> float:
    """``E || y - sum_j H_j v_j I(z_j > 0) ||^2`` under the variational family.

    ``H`` is (J, N, L), ``mu`` (J, L), ``Sigma`` (J, L, L), ``p`` (J,).
    """
    y = np.asarray(y, dtype=float)
    G = p[:, None] * np.einsum("jnl,jl->jn", H, mu)
    Gt = G.sum(axis=0)
    gram = np.einsum("jnl,jnm->jlm", H, H)
    quad = np.einsum("jl,jlm,jm->j", mu, gram, mu)
    trace = np.einsum("jlm,jml->j", gram, Sigma)
    own = (p * (quad + trace)).sum()
    cross = Gt @ Gt - (G * G).sum()
    return float(y @ y - 2.0 * y @ Gt + own + cross)


def update_omega(n_cells: int, sq_norm: float, a_omega: float, b_omega: float):
    """Gamma factor of the residual precision; returns ``(shape, rate)``."""
    shape = 0.5 * n_cells + a_omega
    rate = 0.5 * sq_norm + b_omega
    if not rate > 0:
        raise NonPositiveRate(f"Gamma rate {rate} is not positive (expected squared norm {sq_norm})")
    return shape, rate


def update_lambda(ez, prior_precision, prior_mean):
    """Gaussian factor of one latent K-vector.

    ``prior_precision`` is the K x K prior precision of the vector (for the
    default identity gene covariance, ``V^{-1} / sigma_lambda_sq``).
    Returns ``(mean, cov)``.
    """
    P = np.asarray(prior_precision, dtype=float)
    K = P.shape[0]
    try:
        c = cho_factor(np.eye(K) + P)
    except LinAlgError:
        raise SingularPrior("I + prior precision is not positive definite") from None
    cov = cho_solve(c, np.eye(K))
    mean = cho_solve(c, np.asarray(ez, dtype=float) + P @ np.asarray(prior_mean, dtype=float))
    return mean, 0.5 * (cov + cov.T)


def update_v_given_z(gram, htr, e_omega: float, prior_var):
    """Coefficient factor of one (predictor, FOV) pair given the latent sign.

    ``gram = H^T H``, ``htr = H^T E[R]``, ``prior_var`` the diagonal prior
    covariance of the coefficients. Returns ``(mu_pos, Sigma_pos, Sigma_neg)``;
    the mean for the negative branch is zero.
    """
    prior_var = np.asarray(prior_var, dtype=float)
    prec = e_omega * np.asarray(gram, dtype=float) + np.diag(1.0 / prior_var)
    try:
        c = cho_factor(prec)
    except LinAlgError:
        raise CholeskyFailure("coefficient precision matrix is not positive definite") from None
    Sigma = cho_solve(c, np.eye(len(prior_var)))
    mu = cho_solve(c, e_omega * np.asarray(htr, dtype=float))
    return mu, 0.5 * (Sigma + Sigma.T), np.diag(prior_var)


def inclusion_logit(mu, Sigma_pos, prior_var, e_lambda) -> float:
    try:
        c = cho_factor(Sigma_pos)
    except LinAlgError:
        raise CholeskyFailure("positive-branch covariance is not positive definite") from None
    logdet_pos = 2.0 * np.log(np.diag(c[0])).sum()
    logdet_neg = np.log(np.asarray(prior_var, dtype=float)).sum()
    quad = float(mu @ cho_solve(c, mu))
    return 0.5 * (logdet_pos - logdet_neg) + 0.5 * quad + logit_phi_stable(e_lambda)


def update_inclusion(mu, Sigma_pos, prior_var, e_lambda) -> float:
    """Variational probability that the latent sign is positive, clamped away from 0 and 1."""
    return clamp_p(float(_expit(inclusion_logit(mu, Sigma_pos, prior_var, e_lambda))))


def _expit(x):
    return np.exp(-np.logaddexp(0.0, -x))


def clamp_p(p):
    return np.clip(p, P_CLAMP, 1.0 - P_CLAMP)


def phi_cdf(x):
    return ndtr(x)
