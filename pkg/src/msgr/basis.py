"""Modified squared-exponential kernel and its truncated Hermite eigenbasis.

The 1-D kernel ``exp(-a (x^2 + y^2) - b (x - y)^2)`` has an exact Mercer
expansion with respect to Lebesgue measure:

    eta_l  = sqrt(pi / A) * (b / A)^l
    psi_l  = (2c)^{1/4} h_l(sqrt(2c) x)

with ``c = sqrt(a^2 + 2ab)``, ``A = a + b + c`` and ``h_l`` the orthonormal
Hermite functions. The 2-D kernel factorises over axes, so its eigenpairs are
tensor products.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidShape, NonFiniteBasis


def mse_kernel(s, t, a_gp: float, b_gp: float):
    """Modified squared-exponential kernel between points ``s`` and ``t``.

    Broadcasts over leading axes; the last axis holds the coordinates.
    """
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    return np.exp(-a_gp * ((s ** 2).sum(-1) + (t ** 2).sum(-1))
                  - b_gp * ((s - t) ** 2).sum(-1))


def kernel_matrix(coords, a_gp: float, b_gp: float) -> np.ndarray:
    coords = np.asarray(coords, dtype=float)
    return mse_kernel(coords[:, None, :], coords[None, :, :], a_gp, b_gp)


@dataclass(frozen=True)
class EigenPair1D:
    index: int
    eigenvalue: float
    a_gp: float
    b_gp: float

    @property
    def c(self) -> float:
        return float(np.sqrt(self.a_gp ** 2 + 2.0 * self.a_gp * self.b_gp))

    def __call__(self, x) -> np.ndarray:
        return hermite_functions(np.asarray(x, dtype=float), self.index, self.c)[..., self.index]


def hermite_functions(x: np.ndarray, max_degree: int, c: float) -> np.ndarray:
    """Evaluate psi_0..psi_max_degree at ``x``; returns shape ``x.shape + (max_degree+1,)``.

    Uses the three-term recurrence of the orthonormal Hermite functions, which
    stays finite where the raw polynomials would overflow.
    """
    t = np.sqrt(2.0 * c) * x
    out = np.empty(x.shape + (max_degree + 1,))
    out[..., 0] = np.pi ** -0.25 * np.exp(-0.5 * t * t)
    if max_degree >= 1:
        out[..., 1] = np.sqrt(2.0) * t * out[..., 0]
    for k in range(1, max_degree):
        out[..., k + 1] = (np.sqrt(2.0 / (k + 1)) * t * out[..., k]
                           - np.sqrt(k / (k + 1)) * out[..., k - 1])
    return (2.0 * c) ** 0.25 * out


def eigenpairs_1d(a_gp: float, b_gp: float, max_degree: int) -> list[EigenPair1D]:
    if not a_gp > 0:
        raise InvalidShape(f"the analytic eigenbasis needs a_gp > 0, got {a_gp}")
    if not b_gp > 0:
        raise InvalidShape(f"b_gp must be positive, got {b_gp}")
    if max_degree < 0:
        raise InvalidShape(f"max_degree must be nonnegative, got {max_degree}")
    c = np.sqrt(a_gp ** 2 + 2.0 * a_gp * b_gp)
    A = a_gp + b_gp + c
    eta = np.sqrt(np.pi / A) * (b_gp / A) ** np.arange(max_degree + 1)
    return [EigenPair1D(l, float(eta[l]), a_gp, b_gp) for l in range(max_degree + 1)]


@dataclass
class GPBasis:
    """Truncated 2-D eigenbasis, optionally evaluated at the cells of each FOV.

    ``basis_matrices[fov_id]`` holds ``B[n, l] = sqrt(eta_l) psi_l(s_n)``;
    ``eigenfunctions[fov_id]`` holds the unscaled ``psi_l(s_n)``.
    """

    a_gp: float
    b_gp: float
    degree: int
    eigenvalues: np.ndarray
    pair_indices: np.ndarray
    basis_matrices: dict[int, np.ndarray] = field(default_factory=dict)
    eigenfunctions: dict[int, np.ndarray] = field(default_factory=dict)
    sup_norms: dict[int, float] = field(default_factory=dict)

    @property
    def L(self) -> int:
        return len(self.eigenvalues)

    def psi(self, coords) -> np.ndarray:
        """Eigenfunction matrix (N x L) at arbitrary scaled coordinates."""
        coords = np.atleast_2d(np.asarray(coords, dtype=float))
        c = np.sqrt(self.a_gp ** 2 + 2.0 * self.a_gp * self.b_gp)
        hx = hermite_functions(coords[:, 0], self.degree, c)
        hy = hermite_functions(coords[:, 1], self.degree, c)
        return hx[:, self.pair_indices[:, 0]] * hy[:, self.pair_indices[:, 1]]

    def evaluate(self, coords) -> np.ndarray:
        return self.psi(coords) * np.sqrt(self.eigenvalues)


def eigenpairs_2d(a_gp: float, b_gp: float, degree: int) -> GPBasis:
    """All tensor pairs with total degree <= ``degree``, sorted by descending eigenvalue."""
    eta = np.array([e.eigenvalue for e in eigenpairs_1d(a_gp, b_gp, degree)])
    pairs = [(l1, l2) for l1 in range(degree + 1) for l2 in range(degree + 1 - l1)]
    pairs.sort(key=lambda lp: (-eta[lp[0]] * eta[lp[1]], lp))
    idx = np.array(pairs, dtype=int).reshape(-1, 2)
    return GPBasis(a_gp, b_gp, degree, eta[idx[:, 0]] * eta[idx[:, 1]], idx)


def evaluate_basis(dataset, skeleton: GPBasis) -> GPBasis:
    """Fill the per-FOV basis matrices and sup-norms for already scaled coordinates."""
    out = GPBasis(skeleton.a_gp, skeleton.b_gp, skeleton.degree,
                  skeleton.eigenvalues.copy(), skeleton.pair_indices.copy())
    sq = np.sqrt(out.eigenvalues)
    for f in dataset.fovs:
        psi = out.psi(f.coordinates)
        B = psi * sq
        bad = np.argwhere(~np.isfinite(B))
        if bad.size:
            n, l = bad[0]
            raise NonFiniteBasis(f"FOV {f.fov_id}, cell {f.cell_ids[n]}, basis {l}: non-finite value")
        out.eigenfunctions[f.fov_id] = psi
        out.basis_matrices[f.fov_id] = B
        out.sup_norms[f.fov_id] = float(np.abs(B).max())
    return out


def build_basis(dataset, a_gp: float, b_gp: float, degree: int) -> GPBasis:
    return evaluate_basis(dataset, eigenpairs_2d(a_gp, b_gp, degree))
