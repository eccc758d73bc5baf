"""From node-wise variational output to symmetric, FDR-controlled, PD networks.

Sign convention of the reported surfaces: with ``u_hat`` the symmetrized,
rescaled coefficient vector of an edge (it already carries the ``E omega_ii``
factor),

    omega_ij(s) = -sum_l u_hat_l B_l(s)
    gamma_ij(s) = -omega_ij(s) / E omega_ii
    rho_ij(s)   = -omega_ij(s) / sqrt(E omega_ii E omega_jj)

so a positive coefficient surface means a positive partial correlation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb

import numpy as np
import pandas as pd

from .errors import EdgeNotSelected, MissingNode, SubsetTooSmall

PD_MARGIN = 1e-9


@dataclass
class NetworkEstimate:
    """Post-processed network.

    ``pip`` is (K, p, p); ``edges[k]`` a set of ``(i, j)`` with ``i < j``;
    ``u_sym[(i, j, k)]`` the symmetrized and rescaled coefficients of a
    selected edge on the scaled basis; ``omega_diag`` is (K, p);
    ``scale[(i, j, k)]`` the PD divisor applied to that edge.
    """

    pip: np.ndarray
    kappa: float
    alpha: float
    edges: list
    u_sym: dict
    omega_diag: np.ndarray
    gene_names: list
    fov_ids: list
    basis: object = None
    scale: dict = field(default_factory=dict)

    @property
    def p(self) -> int:
        return self.pip.shape[1]

    @property
    def K(self) -> int:
        return self.pip.shape[0]

    def edges_frame(self) -> pd.DataFrame:
        rows = []
        for k, es in enumerate(self.edges):
            for i, j in sorted(es):
                rows.append((self.fov_ids[k], self.gene_names[i], self.gene_names[j],
                             float(self.pip[k, i, j]),
                             float(np.abs(self.u_sym[(i, j, k)]).sum())))
        return pd.DataFrame(rows, columns=["fov", "gene_i", "gene_j", "pip", "l1_norm"])

    def pip_frame(self) -> pd.DataFrame:
        rows = [(self.fov_ids[k], self.gene_names[i], self.gene_names[j], float(self.pip[k, i, j]))
                for k in range(self.K) for i in range(self.p) for j in range(i + 1, self.p)]
        return pd.DataFrame(rows, columns=["fov", "gene_i", "gene_j", "pip"])


def pip_matrix(fit) -> np.ndarray:
    """Symmetric (K, p, p) inclusion probabilities by the min rule."""
    p, K = fit.p, fit.K
    by_node = {s.node: s for s in fit.states}
    missing = [i for i in range(p) if i not in by_node]
    if missing:
        raise MissingNode(f"fit has no state for node(s) {missing}")
    P = np.zeros((K, p, p))
    for i in range(p):
        s = by_node[i]
        P[:, i, s.others] = s.p_incl
    out = np.minimum(P, np.transpose(P, (0, 2, 1)))
    idx = np.arange(p)
    out[:, idx, idx] = 0.0
    return out


def bfdr_threshold(pips, alpha: float) -> float:
    """Bayesian FDR cutoff: the smallest PIP whose selection keeps mean local FDR <= alpha.

    Returns a value just above one when nothing qualifies.
    """
    q = np.sort(1.0 - np.asarray(pips, dtype=float).ravel())
    if q.size == 0:
        return float(np.nextafter(1.0, 2.0))
    cum = np.cumsum(q) / np.arange(1, q.size + 1)
    ok = np.flatnonzero(cum <= alpha)
    if ok.size == 0:
        return float(np.nextafter(1.0, 2.0))
    return float(1.0 - q[ok[-1]])


def select_edges(pip: np.ndarray, kappa: float) -> list:
    K, p, _ = pip.shape
    iu, ju = np.triu_indices(p, 1)
    return [{(int(i), int(j)) for i, j in zip(iu, ju) if pip[k, i, j] >= kappa} for k in range(K)]


def upper_pips(pip: np.ndarray) -> np.ndarray:
    iu, ju = np.triu_indices(pip.shape[1], 1)
    return pip[:, iu, ju].ravel()


def _coef(fit, i, j, k):
    """Expected coefficients of predictor j in node i's regression, on the scaled basis."""
    s = fit.states[i] if fit.states[i].node == i else next(t for t in fit.states if t.node == i)
    jj = int(np.searchsorted(s.others, j))
    sqrt_eta = np.sqrt(np.asarray(fit.basis.eigenvalues, dtype=float))
    return s.mu[k, jj] / sqrt_eta, s.e_omega[k]


def symmetrize_coefficients(fit, edges) -> dict:
    """``u_tilde = E omega_ii * E u`` per direction; keep the one with smaller l1 norm.

    Ties go to the regression of the lower-index node.
    """
    out = {}
    for k, es in enumerate(edges):
        for i, j in es:
            i, j = min(i, j), max(i, j)
            ui, wi = _coef(fit, i, j, k)
            uj, wj = _coef(fit, j, i, k)
            ti, tj = wi * ui, wj * uj
            out[(i, j, k)] = ti if np.abs(ti).sum() <= np.abs(tj).sum() else tj
    return out


def omega_diagonal(fit) -> np.ndarray:
    out = np.zeros((fit.K, fit.p))
    for s in fit.states:
        out[:, s.node] = s.e_omega
    return out


def pd_rescale(u_sym: dict, sup_norms, omega_diag: np.ndarray, p: int):
    """Shrink edge coefficients so every row of Omega(s) is strictly diagonally dominant.

    ``c_ik = a_k * sum_j ||u_ij||_1 / E omega_ii`` bounds the off-diagonal row
    sum relative to the diagonal. Each edge is divided by the larger of its two
    endpoint factors (with a tiny margin) when that exceeds one, which keeps
    the coefficients symmetric. Returns ``(rescaled, divisors)``.
    """
    K = omega_diag.shape[0]
    c = np.zeros((K, p))
    for (i, j, k), u in u_sym.items():
        l1 = np.abs(u).sum()
        c[k, i] += l1
        c[k, j] += l1
    a = np.asarray(sup_norms, dtype=float)
    c = a[:, None] * c / omega_diag
    out, div = {}, {}
    for (i, j, k), u in u_sym.items():
        d = max(1.0, (1.0 + PD_MARGIN) * max(c[k, i], c[k, j]))
        out[(i, j, k)] = u / d
        div[(i, j, k)] = d
    return out, div


def postprocess(fit, alpha: float | None = None) -> NetworkEstimate:
    alpha = fit.hyperparams.alpha_fdr if alpha is None else alpha
    pip = pip_matrix(fit)
    kappa = bfdr_threshold(upper_pips(pip), alpha)
    edges = select_edges(pip, kappa)
    od = omega_diagonal(fit)
    u = symmetrize_coefficients(fit, edges)
    sup = [fit.basis.sup_norms[f] for f in fit.fov_ids]
    u, div = pd_rescale(u, sup, od, fit.p)
    return NetworkEstimate(pip, kappa, alpha, edges, u, od, list(fit.gene_names),
                           list(fit.fov_ids), fit.basis, div)


def assemble_surfaces(estimate: NetworkEstimate, i: int, j: int, k: int, B=None,
                      allow_unselected: bool = False) -> dict:
    """Per-cell ``gamma``, ``omega_ij`` and ``rho_ij`` of one pair in FOV ``k``.

    ``B`` defaults to the basis matrix at the cells of FOV ``k``.
    """
    if B is None:
        B = estimate.basis.basis_matrices[estimate.fov_ids[k]]
    key = (min(i, j), max(i, j), k)
    if key not in estimate.u_sym:
        if not allow_unselected:
            raise EdgeNotSelected(f"pair ({i}, {j}) not selected in FOV {estimate.fov_ids[k]}")
        z = np.zeros(B.shape[0])
        return {"gamma": z, "omega": z.copy(), "rho": z.copy()}
    s = B @ estimate.u_sym[key]
    wi, wj = estimate.omega_diag[k, i], estimate.omega_diag[k, j]
    return {"gamma": s / wi, "omega": -s, "rho": s / np.sqrt(wi * wj)}


def precision_at_cells(estimate: NetworkEstimate, k: int, B=None) -> np.ndarray:
    """Assembled (N, p, p) precision matrices at the cells of FOV ``k``."""
    if B is None:
        B = estimate.basis.basis_matrices[estimate.fov_ids[k]]
    p = estimate.p
    out = np.zeros((B.shape[0], p, p))
    idx = np.arange(p)
    out[:, idx, idx] = estimate.omega_diag[k]
    for (i, j, kk), u in estimate.u_sym.items():
        if kk == k:
            w = -(B @ u)
            out[:, i, j] = w
            out[:, j, i] = w
    return out


def surfaces_frame(estimate: NetworkEstimate, cell_ids: dict) -> pd.DataFrame:
    frames = []
    for (i, j, k) in sorted(estimate.u_sym, key=lambda t: (t[2], t[0], t[1])):
        fid = estimate.fov_ids[k]
        s = assemble_surfaces(estimate, i, j, k)
        frames.append(pd.DataFrame({
            "fov": fid, "cell_id": cell_ids[fid],
            "gene_i": estimate.gene_names[i], "gene_j": estimate.gene_names[j],
            "gamma": s["gamma"], "omega_ij": s["omega"], "rho_ij": s["rho"]}))
    cols = ["fov", "cell_id", "gene_i", "gene_j", "gamma", "omega_ij", "rho_ij"]
    return pd.concat(frames, ignore_index=True) if frames else pd.DataFrame(columns=cols)


def degree(estimate: NetworkEstimate) -> np.ndarray:
    """(K, p) number of selected edges incident to each gene."""
    out = np.zeros((estimate.K, estimate.p), dtype=int)
    for k, es in enumerate(estimate.edges):
        for i, j in es:
            out[k, i] += 1
            out[k, j] += 1
    return out


def connectivity_score(estimate: NetworkEstimate, subset=None) -> np.ndarray:
    """Per-FOV ``100 * selected edges / possible edges`` within a gene subset."""
    idx = set(range(estimate.p)) if subset is None else {
        estimate.gene_names.index(g) if isinstance(g, str) else int(g) for g in subset}
    if len(idx) < 2:
        raise SubsetTooSmall(f"connectivity score needs at least 2 genes, got {len(idx)}")
    possible = comb(len(idx), 2)
    return np.array([100.0 * sum(1 for i, j in es if i in idx and j in idx) / possible
                     for es in estimate.edges])


def connectivity_summaries(estimate: NetworkEstimate, pathways: dict | None = None):
    """Degree table (``fov,gene,degree``) and CS table (``fov,pathway,cs``)."""
    deg = degree(estimate)
    deg_df = pd.DataFrame(
        [(estimate.fov_ids[k], g, int(deg[k, n])) for k in range(estimate.K)
         for n, g in enumerate(estimate.gene_names)], columns=["fov", "gene", "degree"])
    pathways = {"all": list(estimate.gene_names)} if pathways is None else pathways
    rows = []
    for name, genes in pathways.items():
        cs = connectivity_score(estimate, genes)
        rows += [(estimate.fov_ids[k], name, float(cs[k])) for k in range(estimate.K)]
    return deg_df, pd.DataFrame(rows, columns=["fov", "pathway", "cs"])
