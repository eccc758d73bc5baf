"""Synthetic multi-FOV datasets with known spatially varying precision matrices.

FOVs are squares laid out on a regular grid. Edges are switched on per FOV by
thresholding spatially correlated latent Gaussians, and every active edge
carries a smooth function of location. Cells are drawn independently from
``N(0, Omega(s)^{-1})``.

Scenario I uses a fixed bank of bounded smooth forms. Scenario II uses
unit-variance draws from the MSE-kernel Gaussian process (the original
function library is derived from real-data fits, which are not available
here), retained when their peak exceeds 0.5 and then doubled.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .basis import eigenpairs_2d
from .data import FovBlock, FovGeometry, SpatialDataset, fov_geometry, save_dataset
from .errors import ConfigError, NonPD, TooManyCells
from .priors import build_fov_correlation

SCENARIO_II_LIBRARY = {"a_gp": 0.01, "b_gp": 0.5, "degree": 10, "min_peak": 0.5, "scale": 2.0}
DIAG_STEP = 0.2
MAX_REPAIRS = 100


@dataclass
class SimConfig:
    p: int = 30
    grid_rows: int = 5
    grid_cols: int = 5
    n_cells: int = 1000
    rho_decay: float = 0.6
    sparsity: float = 0.05
    fov_size: float = 0.4
    fov_spacing: float = 0.6
    candidate_grid: int = 40
    scenario: str = "I"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        if int(self.p) != self.p or self.p < 2:
            raise ConfigError(f"p must be an integer >= 2, got {self.p!r}")
        for name in ("grid_rows", "grid_cols", "n_cells", "candidate_grid"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
        if not (0.0 < self.sparsity < 1.0):
            raise ConfigError(f"sparsity must lie in (0, 1), got {self.sparsity!r}")
        if not (0.0 < self.rho_decay < 1.0):
            raise ConfigError(f"rho_decay must lie in (0, 1), got {self.rho_decay!r}")
        if not (self.fov_size > 0 and self.fov_spacing >= 0):
            raise ConfigError("fov_size must be positive and fov_spacing nonnegative")
        if str(self.scenario) not in ("I", "II"):
            raise ConfigError(f"scenario must be 'I' or 'II', got {self.scenario!r}")
        if self.n_cells > self.candidate_grid ** 2:
            raise TooManyCells(
                f"n_cells={self.n_cells} exceeds the {self.candidate_grid}^2 candidate positions")

    @property
    def K(self) -> int:
        return self.grid_rows * self.grid_cols

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class GroundTruth:
    """Simulated truth.

    ``true_edges[k]`` is a set of ``(i, j)`` with ``i < j``. ``functions`` maps
    ``(i, j, k)`` of active edges to a callable of original coordinates
    returning ``omega_ij(s)``. ``diag[k, i]`` is the constant ``omega_ii``.
    """

    true_edges: list
    functions: dict
    diag: np.ndarray
    latent_Lambda: np.ndarray
    pairs: list
    threshold: float
    seed: int
    fov_ids: list = field(default_factory=list)
    origins: np.ndarray | None = None

    def true_precision_fn(self, i: int, j: int, k: int):
        if i == j:
            d = self.diag[k, i]
            return lambda s: np.full(np.atleast_2d(s).shape[0], d)
        key = (min(i, j), max(i, j), k)
        if key in self.functions:
            return self.functions[key]
        return lambda s: np.zeros(np.atleast_2d(s).shape[0])

    def precision_at(self, k: int, coords) -> np.ndarray:
        """Stack of p x p precision matrices at the given locations of FOV ``k``."""
        coords = np.atleast_2d(coords)
        p = self.diag.shape[1]
        out = np.zeros((coords.shape[0], p, p))
        idx = np.arange(p)
        out[:, idx, idx] = self.diag[k]
        for (i, j, kk), f in self.functions.items():
            if kk == k:
                v = f(coords)
                out[:, i, j] = v
                out[:, j, i] = v
        return out

    def edges_frame(self, gene_names) -> pd.DataFrame:
        rows = [(self.fov_ids[k], gene_names[i], gene_names[j])
                for k, es in enumerate(self.true_edges) for i, j in sorted(es)]
        return pd.DataFrame(rows, columns=["fov", "gene_i", "gene_j"])


def _stage_rngs(seed: int):
    names = ("geometry", "selection", "functions", "expression")
    return dict(zip(names, (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(4))))


def generate_geometry(config: SimConfig, rng=None) -> SpatialDataset:
    """Coordinates only (expression is a zero placeholder); FOV ids run row-major."""
    rng = _stage_rngs(config.seed)["geometry"] if rng is None else rng
    pitch = config.fov_size + config.fov_spacing
    g = np.linspace(0.0, config.fov_size, config.candidate_grid)
    lattice = np.stack(np.meshgrid(g, g, indexing="xy"), axis=-1).reshape(-1, 2)
    fovs = []
    for r in range(config.grid_rows):
        for c in range(config.grid_cols):
            k = r * config.grid_cols + c
            origin = np.array([c * pitch, r * pitch])
            pick = np.sort(rng.choice(len(lattice), size=config.n_cells, replace=False))
            coords = origin + lattice[pick]
            fovs.append(FovBlock(k, coords, np.zeros((config.n_cells, config.p)),
                                 cell_ids=k * config.n_cells + np.arange(config.n_cells),
                                 centroid=origin + 0.5 * config.fov_size))
    return SpatialDataset(fovs, _gene_names(config.p))


def _gene_names(p):
    width = len(str(p))
    return [f"g{i + 1:0{width}d}" for i in range(p)]


def generate_selection(config: SimConfig, geometry: SpatialDataset, rng=None):
    """Draw latent selection vectors and threshold them at the pooled quantile.

    Returns ``(pairs, Lambda, threshold, true_edges)``.
    """
    rng = _stage_rngs(config.seed)["selection"] if rng is None else rng
    geo = fov_geometry(geometry)
    V = build_fov_correlation(geo, config.rho_decay)
    p, K = config.p, geometry.K
    pairs = [(i, j) for i in range(p) for j in range(i + 1, p)]
    Lam = rng.multivariate_normal(np.zeros(K), V, size=len(pairs), method="eigh")
    thr = float(np.quantile(Lam, 1.0 - config.sparsity))
    sel = Lam > thr
    edges = [{pairs[t] for t in np.flatnonzero(sel[:, k])} for k in range(K)]
    return pairs, Lam, thr, edges


# Scenario I bank: smooth shapes on the unit square, all strictly positive
# so an active edge is never switched off inside its FOV.
def _bank():
    pi = np.pi
    return [
        lambda u, v: 0.6 + 0.4 * np.sin(pi * u) * np.sin(pi * v),
        lambda u, v: 0.6 + 0.4 * np.cos(pi * u),
        lambda u, v: 0.6 + 0.4 * (2.0 * v - 1.0),
        lambda u, v: 0.6 + 0.4 * (u + v - 1.0),
        lambda u, v: 0.6 + 0.4 * np.sin(2.0 * pi * u) * np.cos(pi * v),
        lambda u, v: 0.6 + 0.4 * np.cos(pi * (u - v)),
    ]


BANK_SIZE = len(_bank())


class _BankFunction:
    """Picklable Scenario I edge function on original coordinates."""

    def __init__(self, form: int, amplitude: float, origin, size: float, norm: float):
        self.form, self.amplitude, self.norm = int(form), float(amplitude), float(norm)
        self.origin, self.size = np.asarray(origin, dtype=float), float(size)

    def __call__(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        u = (s[:, 0] - self.origin[0]) / self.size
        v = (s[:, 1] - self.origin[1]) / self.size
        return self.amplitude * _bank()[self.form](u, v) / self.norm


class _GPFunction:
    """Picklable Scenario II edge function: a truncated GP draw on local coordinates."""

    def __init__(self, coef, center, scale: float, multiplier: float):
        self.coef = np.asarray(coef, dtype=float)
        self.center, self.scale = np.asarray(center, dtype=float), float(scale)
        self.multiplier = float(multiplier)

    def __call__(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=float))
        return self.multiplier * (_library_basis().evaluate((s - self.center) / self.scale) @ self.coef)


_LIB_CACHE = {}


def _library_basis():
    if "b" not in _LIB_CACHE:
        lib = SCENARIO_II_LIBRARY
        _LIB_CACHE["b"] = eigenpairs_2d(lib["a_gp"], lib["b_gp"], lib["degree"])
    return _LIB_CACHE["b"]


def _lattice(config, origin):
    g = np.linspace(0.0, config.fov_size, config.candidate_grid)
    return origin + np.stack(np.meshgrid(g, g, indexing="xy"), axis=-1).reshape(-1, 2)


def build_precision_surfaces(config: SimConfig, geometry: SpatialDataset, edges, rng=None):
    """Edge functions and constant diagonals per FOV; returns ``(functions, diag)``.

    Diagonals are chosen on the full candidate lattice, so every possible cell
    location has a positive definite precision matrix.
    """
    rng = _stage_rngs(config.seed)["functions"] if rng is None else rng
    p, K = config.p, geometry.K
    functions = {}
    diag = np.ones((K, p))
    origins = [f.centroid - 0.5 * config.fov_size for f in geometry.fovs]
    for k in range(K):
        grid = _lattice(config, origins[k])
        for i, j in sorted(edges[k]):
            if config.scenario == "I":
                form = int(rng.integers(BANK_SIZE))
                amp = rng.uniform(0.3, 0.6) * rng.choice([-1.0, 1.0])
                probe = _BankFunction(form, 1.0, origins[k], config.fov_size, 1.0)
                norm = float(np.abs(probe(grid)).max())
                functions[(i, j, k)] = _BankFunction(form, amp, origins[k], config.fov_size, norm)
            else:
                functions[(i, j, k)] = _draw_gp_function(rng, grid, geometry.fovs[k].centroid,
                                                         config.fov_size)
        rows = np.zeros((len(grid), p))
        for (i, j, kk), f in functions.items():
            if kk == k:
                a = np.abs(f(grid))
                rows[:, i] += a
                rows[:, j] += a
        if config.scenario == "I":
            diag[k] = 1.0 + rows.max(axis=0)
        else:
            diag[k] = _repair_diagonal(functions, k, grid, p)
    return functions, diag


def _draw_gp_function(rng, grid, center, fov_size):
    lib = SCENARIO_II_LIBRARY
    basis = _library_basis()
    scale = fov_size / np.sqrt(12.0)
    Bg = basis.evaluate((grid - center) / scale)
    for _ in range(10_000):
        coef = rng.standard_normal(basis.L)
        if np.abs(Bg @ coef).max() > lib["min_peak"]:
            return _GPFunction(coef, center, scale, lib["scale"])
    raise NonPD("could not draw a library function exceeding the retention threshold")


def _repair_diagonal(functions, k, grid, p):
    off = np.zeros((len(grid), p, p))
    for (i, j, kk), f in functions.items():
        if kk == k:
            v = f(grid)
            off[:, i, j] = v
            off[:, j, i] = v
    d = 1.0
    idx = np.arange(p)
    for _ in range(MAX_REPAIRS + 1):
        off[:, idx, idx] = d
        if np.linalg.eigvalsh(off).min() > 0:
            return np.full(p, d)
        d += DIAG_STEP
    raise NonPD(f"FOV {k}: precision still indefinite after {MAX_REPAIRS} diagonal increments")


def sample_expression(truth: GroundTruth, geometry: SpatialDataset, rng) -> SpatialDataset:
    """Draw every cell independently from ``N(0, Omega(s)^{-1})``."""
    fovs = []
    for k, f in enumerate(geometry.fovs):
        Om = truth.precision_at(k, f.coordinates)
        try:
            R = np.linalg.cholesky(Om)
        except np.linalg.LinAlgError:
            raise NonPD(f"FOV {f.fov_id}: precision matrix not positive definite at some cell") from None
        z = rng.standard_normal((f.n_cells, Om.shape[1], 1))
        x = np.linalg.solve(np.transpose(R, (0, 2, 1)), z)[..., 0]
        fovs.append(FovBlock(f.fov_id, f.coordinates, x, f.cell_ids, f.centroid))
    return SpatialDataset(fovs, list(geometry.gene_names), geometry.region_labels)


def simulate(config: SimConfig):
    """Full generation from ``config`` alone; returns ``(dataset, truth)``."""
    rngs = _stage_rngs(config.seed)
    geom = generate_geometry(config, rngs["geometry"])
    pairs, Lam, thr, edges = generate_selection(config, geom, rngs["selection"])
    functions, diag = build_precision_surfaces(config, geom, edges, rngs["functions"])
    origins = np.array([f.centroid - 0.5 * config.fov_size for f in geom.fovs])
    truth = GroundTruth(edges, functions, diag, Lam, pairs, thr, config.seed,
                        geom.fov_ids, origins)
    return sample_expression(truth, geom, rngs["expression"]), truth


def write_simulation(dataset: SpatialDataset, truth: GroundTruth, config: SimConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(dataset, out / "expression.csv", out / "coords.csv")
    truth.edges_frame(dataset.gene_names).to_csv(out / "truth_edges.csv", index=False)
    doc = {"config": config.to_dict(), "seed": config.seed}
    if config.scenario == "II":
        doc["function_library"] = {
            **SCENARIO_II_LIBRARY,
            "note": "unit-variance MSE-kernel GP draws substitute for a real-data library",
        }
    (out / "config.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def read_truth_edges(path, gene_names, fov_ids):
    df = pd.read_csv(path)
    missing = [c for c in ("fov", "gene_i", "gene_j") if c not in df.columns]
    if missing:
        from .errors import MissingColumn
        raise MissingColumn(f"{path}: missing column(s) {missing}")
    return edges_from_frame(df, gene_names, fov_ids, path)


def edges_from_frame(df, gene_names, fov_ids, source="<frame>"):
    from .errors import DimensionMismatch
    gidx = {g: n for n, g in enumerate(gene_names)}
    kidx = {int(f): n for n, f in enumerate(fov_ids)}
    edges = [set() for _ in fov_ids]
    for f, a, b in zip(df["fov"], df["gene_i"].astype(str), df["gene_j"].astype(str)):
        if int(f) not in kidx or a not in gidx or b not in gidx:
            raise DimensionMismatch(f"{source}: edge ({f}, {a}, {b}) outside the gene/FOV set")
        i, j = sorted((gidx[a], gidx[b]))
        edges[kidx[int(f)]].add((i, j))
    return edges
