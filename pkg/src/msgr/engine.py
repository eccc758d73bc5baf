"""Node-wise augmented mean-field variational Bayes.

Each response node ``i`` is regressed on every other node with spatially
varying, selectable coefficients. Node regressions are independent, so
:func:`fit` may farm them out to worker processes without changing results.

Coefficients are parameterised on the eigenfunction scale: the design column
for predictor ``j`` and basis ``l`` is ``Y_j(s) psi_l(s)`` and the coefficient
``v_l`` has prior variance ``sigma_gp_sq * eta_l``. This is the same model as
``u_l ~ N(0, sigma_gp_sq)`` on the scaled basis ``sqrt(eta_l) psi_l``, with
``v = u * sqrt(eta)``.
"""

from __future__ import annotations

import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import updates as U
from .errors import CholeskyFailure, MsgrError, NonPositiveRate, SingularDesign


# ---------------------------------------------------------------------------
# shared, read-only design quantities


@dataclass
class DesignCache:
    """Per-FOV quantities shared by all node regressions.

    ``H[k]`` is (p, N_k, L) with ``H[k][j] = Y_j * psi``; ``gram[k]`` the
    (p, L, L) Gram matrices; ``W[k]``/``evals[k]`` diagonalise the prior-whitened
    Gram so every coefficient solve is a pair of matrix-vector products.
    """

    Y: list
    H: list
    gram: list
    W: list
    evals: list
    prior_var: np.ndarray
    sqrt_eta: np.ndarray
    B: list

    @property
    def K(self) -> int:
        return len(self.Y)

    @property
    def p(self) -> int:
        return self.Y[0].shape[1]

    @property
    def L(self) -> int:
        return len(self.prior_var)


def build_cache(dataset, basis, sigma_gp_sq: float) -> DesignCache:
    eta = np.asarray(basis.eigenvalues, dtype=float)
    prior_var = sigma_gp_sq * eta
    t = np.sqrt(prior_var)
    Y, H, gram, W, evals, Bs = [], [], [], [], [], []
    for f in dataset.fovs:
        psi = basis.eigenfunctions[f.fov_id]
        y = f.expression
        Hk = np.ascontiguousarray(np.transpose(y[:, :, None] * psi[:, None, :], (1, 0, 2)))
        Gk = np.einsum("jnl,jnm->jlm", Hk, Hk)
        Gk = 0.5 * (Gk + np.transpose(Gk, (0, 2, 1)))
        lam, Q = np.linalg.eigh(t[None, :, None] * Gk * t[None, None, :])
        Y.append(y)
        H.append(Hk)
        gram.append(Gk)
        W.append(t[None, :, None] * Q)
        evals.append(np.maximum(lam, 0.0))
        Bs.append(basis.basis_matrices[f.fov_id])
    return DesignCache(Y, H, gram, W, evals, prior_var, np.sqrt(eta), Bs)


# ---------------------------------------------------------------------------
# state containers


@dataclass
class NodeVariationalState:
    """Variational parameters of the regression of node ``i`` on the others.

    Predictor axis ``j`` runs over ``others`` (all nodes except ``i``, in
    increasing order). Shapes: ``mu`` (K, p-1, L), ``Sigma`` (K, p-1, L, L),
    ``p_incl`` and ``ez`` (K, p-1), ``lam_mean`` (p-1, K), ``lam_cov``
    (p-1, K, K), ``omega_shape``/``omega_rate`` (K,).
    """

    node: int
    others: np.ndarray
    omega_shape: np.ndarray
    omega_rate: np.ndarray
    lam_mean: np.ndarray
    lam_cov: np.ndarray
    mu: np.ndarray
    Sigma: np.ndarray
    p_incl: np.ndarray
    ez: np.ndarray
    prior_var: np.ndarray

    @property
    def e_omega(self) -> np.ndarray:
        return self.omega_shape / self.omega_rate

    @property
    def e_lambda(self) -> np.ndarray:
        """E lambda as (K, p-1)."""
        return self.lam_mean.T

    def v_neg_cov(self) -> np.ndarray:
        """Covariance of the coefficient branch with a negative latent (the prior)."""
        return np.diag(self.prior_var)

    def copy(self) -> "NodeVariationalState":
        return NodeVariationalState(
            self.node, self.others.copy(), *(np.array(getattr(self, n)) for n in _ARRAY_FIELDS))

    def to_dict(self, include_cov: bool = True) -> dict:
        """JSON-ready dict; ``include_cov=False`` drops the (large) L x L covariances."""
        out = {"node": int(self.node), "others": self.others.tolist()}
        for n in _ARRAY_FIELDS:
            if n == "Sigma" and not include_cov:
                continue
            out[n] = np.asarray(getattr(self, n)).tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "NodeVariationalState":
        return cls(int(d["node"]), np.asarray(d["others"], dtype=int),
                   *(np.asarray(d[n], dtype=float) for n in _ARRAY_FIELDS))


_ARRAY_FIELDS = ("omega_shape", "omega_rate", "lam_mean", "lam_cov", "mu", "Sigma",
                 "p_incl", "ez", "prior_var")


@dataclass
class WorkBuffers:
    """Node-specific views of the design plus the running expectations.

    ``H[k]`` is (p-1, N_k, L); ``G[k]`` (p-1, N_k) holds ``p * H mu`` and
    ``Gt[k]`` their sum.
    """

    node: int
    others: np.ndarray
    y: list
    H: list
    gram: list
    W: list
    evals: list
    hty: list
    yy: np.ndarray
    G: list = field(default_factory=list)
    Gt: list = field(default_factory=list)

    def partial_residual(self, j: int, k: int) -> np.ndarray:
        return self.y[k] - (self.Gt[k] - self.G[k][j])

    def refresh(self, state: NodeVariationalState) -> None:
        self.G = [state.p_incl[k][:, None] * np.einsum("jnl,jl->jn", self.H[k], state.mu[k])
                  for k in range(len(self.y))]
        self.Gt = [g.sum(axis=0) for g in self.G]


def build_design(dataset, basis, i: int, cache: DesignCache | None = None,
                 sigma_gp_sq: float = 1.0) -> WorkBuffers:
    """Design matrices of node ``i``: ``H[k][j][n, l] = Y_j(s_n) psi_l(s_n)``."""
    if cache is None:
        cache = build_cache(dataset, basis, sigma_gp_sq)
    others = np.array([j for j in range(cache.p) if j != i], dtype=int)
    y = [Y[:, i].copy() for Y in cache.Y]
    H = [h[others] for h in cache.H]
    hty = [np.einsum("jnl,n->jl", h, yk) for h, yk in zip(H, y)]
    return WorkBuffers(i, others, y, H, [g[others] for g in cache.gram],
                       [w[others] for w in cache.W], [e[others] for e in cache.evals],
                       hty, np.array([yk @ yk for yk in y]))


# ---------------------------------------------------------------------------
# initialisation


def _ridge_vb(X_gram_dual, y, sigma_sq, a_omega, b_omega, n_iter):
    """VB Gaussian linear regression in dual form; returns the dual weights and E omega.

    ``X_gram_dual = X X^T``. The coefficient mean is ``X^T w``.
    """
    try:
        s2, V = np.linalg.eigh(X_gram_dual)
    except np.linalg.LinAlgError:
        raise SingularDesign("eigendecomposition of the initial design failed") from None
    s2 = np.maximum(s2, 0.0)
    if not np.all(np.isfinite(s2)):
        raise SingularDesign("initial design has non-finite entries")
    Vy = V.T @ y
    n = len(y)
    e_omega = a_omega / b_omega
    shape = a_omega + 0.5 * n
    for _ in range(n_iter):
        c = 1.0 / (e_omega * sigma_sq)
        shrink = s2 / (s2 + c)
        resid = ((1.0 - shrink) * Vy) ** 2
        resid_total = resid.sum() + (y @ y - Vy @ Vy)
        trace = (s2 / (e_omega * s2 + 1.0 / sigma_sq)).sum()
        e_omega = shape / (b_omega + 0.5 * (resid_total + trace))
    c = 1.0 / (e_omega * sigma_sq)
    w = V @ (Vy / (s2 + c))
    return w, e_omega


def init_node(i: int, dataset, basis, hyperparams, prior=None,
              buffers: WorkBuffers | None = None) -> NodeVariationalState:
    """Starting point from a per-FOV ridge-type VB fit on the joint design.

    The joint regression uses all predictors at once with ``u ~ N(0, sigma_gp_sq I)``
    on the scaled basis; it is solved in its N x N dual form since the joint
    design usually has more columns than cells.
    """
    hp = hyperparams
    if buffers is None:
        buffers = build_design(dataset, basis, i, sigma_gp_sq=hp.sigma_gp_sq)
    others = buffers.others
    K, J = len(buffers.y), len(others)
    eta = np.asarray(basis.eigenvalues, dtype=float)
    sqrt_eta = np.sqrt(eta)
    L = len(eta)
    prior_var = hp.sigma_gp_sq * eta

    mu = np.zeros((K, J, L))
    for k, f in enumerate(dataset.fovs):
        B = basis.basis_matrices[f.fov_id]
        Yo = f.expression[:, others]
        dual = (Yo @ Yo.T) * (B @ B.T)
        w, _ = _ridge_vb(dual, buffers.y[k], hp.sigma_gp_sq, hp.a_omega, hp.b_omega, hp.init_iter)
        u = np.einsum("nl,nj->jl", B, Yo * w[:, None])
        mu[k] = u * sqrt_eta

    shape = np.full(K, hp.a_omega + 0.0)
    rate = np.full(K, hp.b_omega + 0.0)
    e_omega = shape / rate
    Sigma = np.empty((K, J, L, L))
    for k in range(K):
        Sigma[k] = _branch_cov(buffers.W[k], buffers.evals[k], e_omega[k])

    if prior is None:
        lam_mean = np.zeros((J, K))
        lam_cov = np.broadcast_to(np.eye(K), (J, K, K)).copy()
    else:
        M = prior.prior_mean(i, len(others) + 1)
        lam_mean = M.T.copy()
        lam_cov = _lambda_covs(prior, i, J + 1)[0]
    return NodeVariationalState(i, others, shape, rate, lam_mean, lam_cov, mu, Sigma,
                                np.full((K, J), 0.5), np.zeros((K, J)), prior_var)


def _branch_cov(W, evals, e_omega):
    d = 1.0 / (e_omega * evals + 1.0)
    S = (W * d[:, None, :]) @ np.transpose(W, (0, 2, 1))
    return 0.5 * (S + np.transpose(S, (0, 2, 1)))


def _lambda_covs(prior, i, p):
    """Per-predictor posterior covariance of the latent K-vector and the prior precision.

    Returns ``(cov, prior_prec, coupling)`` where ``coupling`` is the
    (p-1) x (p-1) inverse gene covariance.
    """
    Uinv = prior.row_precision(p, i)
    Vinv = np.linalg.inv(prior.V)
    Vinv = 0.5 * (Vinv + Vinv.T)
    J, K = p - 1, prior.V.shape[0]
    cov = np.empty((J, K, K))
    prec = np.empty((J, K, K))
    for j in range(J):
        prec[j] = Uinv[j, j] / prior.sigma_lambda_sq * Vinv
        try:
            c = np.linalg.cholesky(np.eye(K) + prec[j])
        except np.linalg.LinAlgError:
            raise CholeskyFailure("latent selection precision is not positive definite") from None
        ci = np.linalg.inv(c)
        cov[j] = ci.T @ ci
    return cov, prec, Uinv


# ---------------------------------------------------------------------------
# the sweep


def expected_sq_norm_fast(buffers: WorkBuffers, state: NodeVariationalState, k: int) -> float:
    G, Gt, y = buffers.G[k], buffers.Gt[k], buffers.y[k]
    mu, gram = state.mu[k], buffers.gram[k]
    quad = np.einsum("jl,jlm,jm->j", mu, gram, mu)
    trace = np.einsum("jlm,jlm->j", gram, state.Sigma[k])
    own = (state.p_incl[k] * (quad + trace)).sum()
    return float(buffers.yy[k] - 2.0 * (y @ Gt) + own + Gt @ Gt - np.einsum("jn,jn->", G, G))


def _sweep(state, buffers, prior_mean, lam_cov, lam_prec, Uinv, hp):
    """One Algorithm-S1 pass in place (freshest values everywhere)."""
    K, J = state.p_incl.shape
    for k in range(K):
        n_k = len(buffers.y[k])
        sq = expected_sq_norm_fast(buffers, state, k)
        shape, rate = U.update_omega(n_k, sq, hp.a_omega, hp.b_omega)
        state.omega_shape[k], state.omega_rate[k] = shape, rate
        w = shape / rate

        Wk, ek = buffers.W[k], buffers.evals[k]
        d = 1.0 / (w * ek + 1.0)
        state.Sigma[k] = _branch_cov(Wk, ek, w)
        half_logdet = -0.5 * np.log1p(w * ek).sum(axis=1)
        H, gram, hty, G = buffers.H[k], buffers.gram[k], buffers.hty[k], buffers.G[k]
        Gt = buffers.Gt[k]
        for j in range(J):
            # latent selection vector, mean-field over the other predictors
            m = prior_mean[:, j]
            if Uinv is not None:
                off = Uinv[j] / Uinv[j, j]
                off[j] = 0.0
                m = m - (state.lam_mean - prior_mean.T).T @ off
            rhs = state.ez[:, j] + lam_prec[j] @ m
            state.lam_mean[j] = lam_cov[j] @ rhs
            e_lam = state.lam_mean[j, k]

            # coefficients given a positive latent
            b = hty[j] - H[j].T @ Gt + gram[j] @ (state.p_incl[k, j] * state.mu[k, j])
            proj = Wk[j].T @ (w * b)
            mu_new = Wk[j] @ (d[j] * proj)
            quad = float(d[j] @ (proj * proj))

            state.ez[k, j] = U.expected_z(e_lam, state.p_incl[k, j])
            logit = half_logdet[j] + 0.5 * quad + U.logit_phi_stable(e_lam)
            p_new = float(U.clamp_p(U._expit(logit)))

            g_new = p_new * (H[j] @ mu_new)
            Gt += g_new - G[j]
            G[j] = g_new
            state.mu[k, j] = mu_new
            state.p_incl[k, j] = p_new


def _check_state(state):
    if not np.all(state.omega_rate > 0):
        raise NonPositiveRate(f"node {state.node}: non-positive Gamma rate")
    for name in ("mu", "p_incl", "lam_mean", "ez"):
        if not np.all(np.isfinite(getattr(state, name))):
            raise CholeskyFailure(f"node {state.node}: non-finite {name}")


def _damp_state(new, old, lr):
    for name in ("omega_rate", "lam_mean", "mu", "Sigma", "p_incl", "ez"):
        setattr(new, name, U.damp(getattr(new, name), getattr(old, name), lr))


def _change(a, b) -> float:
    return max(
        np.abs(a.p_incl - b.p_incl).max(),
        np.abs(a.mu - b.mu).max(),
        np.abs(a.e_omega - b.e_omega).max(),
        np.abs(a.lam_mean - b.lam_mean).max(),
    )


@dataclass
class NodeResult:
    state: NodeVariationalState
    iterations: int
    change: float
    converged: bool
    history: list


def run_node(i: int, dataset, basis, prior, hyperparams, cache: DesignCache | None = None,
             verbose: bool = False) -> NodeResult:
    """Coordinate ascent for node ``i`` until the sup-norm change drops below ``tol``."""
    hp = hyperparams
    if cache is None:
        cache = build_cache(dataset, basis, hp.sigma_gp_sq)
    buffers = build_design(dataset, basis, i, cache)
    state = init_node(i, dataset, basis, hp, prior, buffers)
    buffers.refresh(state)
    p = cache.p
    lam_cov, lam_prec, Uinv = _lambda_covs(prior, i, p)
    if prior.U is None:
        Uinv = None
    prior_mean = prior.prior_mean(i, p)
    state.lam_cov = lam_cov

    history = []
    change, it, converged = np.inf, 0, False
    for it in range(1, hp.max_iter + 1):
        old = state.copy()
        _sweep(state, buffers, prior_mean, lam_cov, lam_prec, Uinv, hp)
        _damp_state(state, old, hp.learning_rate)
        _check_state(state)
        buffers.refresh(state)
        change = float(_change(state, old))
        history.append(change)
        if verbose:
            print(f"node {i} sweep {it} change {change:.3e}", file=sys.stderr, flush=True)
        if change < hp.tol:
            converged = True
            break
    return NodeResult(state, it, change, converged, history)


# ---------------------------------------------------------------------------
# all nodes


@dataclass
class FitResult:
    states: list
    iterations: np.ndarray
    final_change: np.ndarray
    converged: np.ndarray
    hyperparams: object
    basis: object
    gene_names: list
    fov_ids: list
    rho_decay: float
    histories: list = field(default_factory=list)

    @property
    def p(self) -> int:
        return len(self.gene_names)

    @property
    def K(self) -> int:
        return len(self.fov_ids)

    @property
    def all_converged(self) -> bool:
        return bool(np.all(self.converged))

    def convergence_report(self) -> dict:
        return {
            "converged": [bool(c) for c in self.converged],
            "iterations": [int(n) for n in self.iterations],
            "final_change": [float(c) for c in self.final_change],
            "all_converged": self.all_converged,
        }

    def to_json(self, include_cov: bool = False) -> str:
        doc = {
            "gene_names": self.gene_names,
            "fov_ids": [int(f) for f in self.fov_ids],
            "rho_decay": float(self.rho_decay),
            "hyperparams": self.hyperparams.to_dict(),
            "basis": {"a_gp": self.basis.a_gp, "b_gp": self.basis.b_gp,
                      "degree": self.basis.degree},
            **self.convergence_report(),
            "states": [s.to_dict(include_cov) for s in self.states],
        }
        return json.dumps(doc)


class NodeFitError(MsgrError):
    """Wraps a failure in one node regression, keeping the original exit code."""

    def __init__(self, node: int, err: Exception):
        super().__init__(f"node {node}: {type(err).__name__}: {err}")
        self.node = node
        self.original = err
        self.exit_code = getattr(err, "exit_code", 1)


_WORKER = {}


def _worker_init(dataset, basis, prior, hyperparams, verbose):
    _WORKER.update(dataset=dataset, basis=basis, prior=prior, hp=hyperparams, verbose=verbose,
                   cache=build_cache(dataset, basis, hyperparams.sigma_gp_sq))


def _worker_run(i):
    w = _WORKER
    try:
        return i, run_node(i, w["dataset"], w["basis"], w["prior"], w["hp"], w["cache"],
                           w["verbose"]), None
    except MsgrError as e:
        return i, None, e


def fit(dataset, hyperparams, prior, basis, threads: int = 1, verbose: bool = False,
        rho_decay: float | None = None, nodes=None) -> FitResult:
    """Run every node regression; results do not depend on ``threads``."""
    nodes = list(range(dataset.p)) if nodes is None else list(nodes)
    args = (dataset, basis, prior, hyperparams, verbose)
    if threads <= 1 or len(nodes) == 1:
        _worker_init(*args)
        out = [_worker_run(i) for i in nodes]
        _WORKER.clear()
    else:
        with ProcessPoolExecutor(max_workers=min(threads, len(nodes)),
                                 initializer=_worker_init, initargs=args) as ex:
            out = list(ex.map(_worker_run, nodes))
    errors = [(i, e) for i, _, e in out if e is not None]
    if errors:
        i, e = errors[0]
        raise NodeFitError(i, e)
    res = [r for _, r, _ in out]
    return FitResult(
        states=[r.state for r in res],
        iterations=np.array([r.iterations for r in res]),
        final_change=np.array([r.change for r in res]),
        converged=np.array([r.converged for r in res]),
        hyperparams=hyperparams,
        basis=basis,
        gene_names=list(dataset.gene_names),
        fov_ids=list(dataset.fov_ids),
        rho_decay=float(rho_decay if rho_decay is not None else np.nan),
        histories=[r.history for r in res],
    )
