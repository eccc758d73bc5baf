"""Dataset, geometry and configuration records plus CSV ingestion."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import (
    ConfigError,
    DataError,
    DegenerateGeometry,
    MissingColumn,
    NonFiniteValue,
    ShapeMismatch,
)


@dataclass
class FovBlock:
    """One field of view: cell coordinates and an N x p expression matrix.

    ``centroid`` defaults to the mean of ``coordinates``. Coordinate scaling
    keeps the centroid of the original layout, which is what the macro-level
    correlation needs.
    """

    fov_id: int
    coordinates: np.ndarray
    expression: np.ndarray
    cell_ids: np.ndarray | None = None
    centroid: np.ndarray | None = None

    def __post_init__(self):
        self.coordinates = np.asarray(self.coordinates, dtype=float)
        self.expression = np.asarray(self.expression, dtype=float)
        if self.coordinates.ndim != 2 or self.coordinates.shape[1] != 2:
            raise ShapeMismatch(
                f"FOV {self.fov_id}: coordinates must be N x 2, got {self.coordinates.shape}")
        if self.expression.ndim != 2:
            raise ShapeMismatch(f"FOV {self.fov_id}: expression must be 2-D")
        n = self.coordinates.shape[0]
        if n < 1:
            raise ShapeMismatch(f"FOV {self.fov_id}: no cells")
        if self.expression.shape[0] != n:
            raise ShapeMismatch(
                f"FOV {self.fov_id}: {n} coordinate rows but "
                f"{self.expression.shape[0]} expression rows")
        if self.cell_ids is None:
            self.cell_ids = np.arange(n)
        self.cell_ids = np.asarray(self.cell_ids)
        for name, arr in (("coordinates", self.coordinates), ("expression", self.expression)):
            bad = np.argwhere(~np.isfinite(arr))
            if bad.size:
                r, c = bad[0]
                raise NonFiniteValue(
                    f"FOV {self.fov_id}: non-finite {name} value at cell "
                    f"{self.cell_ids[r]} column {c}")
        if self.centroid is None:
            self.centroid = self.coordinates.mean(axis=0)
        self.centroid = np.asarray(self.centroid, dtype=float)

    @property
    def n_cells(self) -> int:
        return self.coordinates.shape[0]


@dataclass
class SpatialDataset:
    fovs: list[FovBlock]
    gene_names: list[str]
    region_labels: dict[int, str] | None = None

    def __post_init__(self):
        self.gene_names = [str(g) for g in self.gene_names]
        p = len(self.gene_names)
        if p < 2:
            raise DataError(f"need at least 2 genes, got {p}")
        if len(self.fovs) < 1:
            raise DataError("dataset has no FOVs")
        ids = [f.fov_id for f in self.fovs]
        if len(set(ids)) != len(ids):
            raise DataError(f"duplicate FOV ids: {ids}")
        for f in self.fovs:
            if f.expression.shape[1] != p:
                raise ShapeMismatch(
                    f"FOV {f.fov_id}: expression has {f.expression.shape[1]} columns, "
                    f"expected {p}")

    @property
    def p(self) -> int:
        return len(self.gene_names)

    @property
    def K(self) -> int:
        return len(self.fovs)

    @property
    def fov_ids(self) -> list[int]:
        return [f.fov_id for f in self.fovs]


@dataclass
class FovGeometry:
    centroids: np.ndarray
    distances: np.ndarray


@dataclass
class Hyperparams:
    """Fixed hyperparameters of the model and of the fitting loop.

    ``rho_decay=None`` means "estimate from the data" (Moran's I).
    ``sigma_lambda_sq`` multiplies the unit-diagonal FOV correlation matrix.
    """

    a_omega: float = 10.0
    b_omega: float = 10.0
    sigma_gp_sq: float = 1.0
    a_gp: float = 0.01
    b_gp: float = 0.5
    degree: int = 10
    rho_decay: float | None = 0.6
    sigma_lambda_sq: float = 1.0 / 50.0
    prior_mean_M: float | np.ndarray = 0.0
    prior_U: np.ndarray | None = None
    alpha_fdr: float = 0.1
    learning_rate: float = 0.9
    tol: float = 1e-3
    max_iter: int = 300
    init_iter: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self):
        for name in ("a_omega", "b_omega", "sigma_gp_sq", "a_gp", "b_gp", "sigma_lambda_sq", "tol"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ConfigError(f"{name} must be a positive real, got {v!r}")
        if int(self.degree) != self.degree or self.degree < 0:
            raise ConfigError(f"degree must be a nonnegative integer, got {self.degree!r}")
        self.degree = int(self.degree)
        if self.rho_decay is not None and not (0.0 < self.rho_decay < 1.0):
            raise ConfigError(f"rho_decay must lie in (0, 1), got {self.rho_decay!r}")
        if not (0.0 < self.alpha_fdr <= 1.0):
            raise ConfigError(f"alpha_fdr must lie in (0, 1], got {self.alpha_fdr!r}")
        if not (0.0 < self.learning_rate <= 1.0):
            raise ConfigError(f"learning_rate must lie in (0, 1], got {self.learning_rate!r}")
        if int(self.max_iter) != self.max_iter or self.max_iter < 1:
            raise ConfigError(f"max_iter must be a positive integer, got {self.max_iter!r}")
        self.max_iter = int(self.max_iter)
        if self.prior_U is not None:
            U = np.asarray(self.prior_U, dtype=float)
            if U.ndim != 2 or U.shape[0] != U.shape[1] or not np.allclose(U, U.T):
                raise ConfigError("prior_U must be a symmetric square matrix")
            try:
                np.linalg.cholesky(U)
            except np.linalg.LinAlgError:
                raise ConfigError("prior_U must be positive definite") from None
            self.prior_U = U

    @property
    def n_basis(self) -> int:
        return (self.degree + 1) * (self.degree + 2) // 2

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            out[f.name] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown hyperparameters: {sorted(unknown)}")
        kw = dict(d)
        if isinstance(kw.get("prior_mean_M"), list):
            kw["prior_mean_M"] = np.asarray(kw["prior_mean_M"], dtype=float)
        if kw.get("prior_U") is not None:
            kw["prior_U"] = np.asarray(kw["prior_U"], dtype=float)
        return cls(**kw)


def _require(df: pd.DataFrame, cols, path) -> None:
    missing = [c for c in cols if c not in df.columns]
    if missing:
        raise MissingColumn(f"{path}: missing column(s) {missing}")


def load_dataset(expression_path, coords_path, fov_column: str = "fov",
                 regions_path=None) -> SpatialDataset:
    """Read the expression and coordinate CSVs into a :class:`SpatialDataset`.

    Cells are joined on ``cell_id``. FOVs are ordered by id; within a FOV the
    cells keep the row order of the expression file.
    """
    expr = pd.read_csv(expression_path)
    coords = pd.read_csv(coords_path)
    _require(expr, ["cell_id", fov_column], expression_path)
    _require(coords, ["cell_id", "x", "y"], coords_path)
    if len(expr) != len(coords):
        raise ShapeMismatch(
            f"{expression_path} has {len(expr)} rows but {coords_path} has {len(coords)}")
    genes = [c for c in expr.columns if c not in ("cell_id", fov_column)]
    if expr["cell_id"].duplicated().any():
        raise DataError(f"{expression_path}: duplicate cell_id values")
    coords = coords.set_index("cell_id")
    missing = ~expr["cell_id"].isin(coords.index)
    if missing.any():
        raise ShapeMismatch(
            f"cell_id {expr['cell_id'][missing].iloc[0]} of {expression_path} "
            f"not found in {coords_path}")
    xy = coords.loc[expr["cell_id"], ["x", "y"]].to_numpy(dtype=float)

    values = expr[genes].apply(pd.to_numeric, errors="coerce").to_numpy(dtype=float)
    bad = np.argwhere(~np.isfinite(values))
    if bad.size:
        r, c = bad[0]
        raise NonFiniteValue(
            f"{expression_path}: non-finite value for cell {expr['cell_id'].iloc[r]}, "
            f"gene {genes[c]}")
    bad = np.argwhere(~np.isfinite(xy))
    if bad.size:
        r, c = bad[0]
        raise NonFiniteValue(
            f"{coords_path}: non-finite {'xy'[c]} for cell {expr['cell_id'].iloc[r]}")

    fov = expr[fov_column].to_numpy()
    fovs = []
    for fid in sorted(pd.unique(fov)):
        rows = np.flatnonzero(fov == fid)
        fovs.append(FovBlock(int(fid), xy[rows], values[rows],
                             cell_ids=expr["cell_id"].to_numpy()[rows]))
    regions = load_regions(regions_path) if regions_path is not None else None
    return SpatialDataset(fovs, genes, regions)


def load_regions(path) -> dict[int, str]:
    df = pd.read_csv(path)
    _require(df, ["fov", "region"], path)
    return {int(f): str(r) for f, r in zip(df["fov"], df["region"])}


def save_dataset(dataset: SpatialDataset, expression_path, coords_path) -> None:
    expr_rows, coord_rows = [], []
    for f in dataset.fovs:
        e = pd.DataFrame(f.expression, columns=dataset.gene_names)
        e.insert(0, "fov", f.fov_id)
        e.insert(0, "cell_id", f.cell_ids)
        expr_rows.append(e)
        coord_rows.append(pd.DataFrame({"cell_id": f.cell_ids, "fov": f.fov_id,
                                        "x": f.coordinates[:, 0], "y": f.coordinates[:, 1]}))
    Path(expression_path).parent.mkdir(parents=True, exist_ok=True)
    pd.concat(expr_rows, ignore_index=True).to_csv(expression_path, index=False)
    pd.concat(coord_rows, ignore_index=True).to_csv(coords_path, index=False)


def scale_coordinates(dataset: SpatialDataset) -> SpatialDataset:
    """Center each FOV at its centroid and divide by one global standard deviation.

    The standard deviation is pooled over both axes of all centered
    coordinates, so after scaling that pooled deviation is exactly one.
    The original centroids are carried along for the macro-level geometry.
    """
    centered = [f.coordinates - f.coordinates.mean(axis=0) for f in dataset.fovs]
    sd = float(np.std(np.concatenate(centered)))
    if not sd > 0:
        raise DegenerateGeometry("global coordinate standard deviation is zero")
    fovs = [dataclasses.replace(f, coordinates=c / sd, centroid=f.centroid.copy())
            for f, c in zip(dataset.fovs, centered)]
    return SpatialDataset(fovs, list(dataset.gene_names), dataset.region_labels)


def fov_geometry(dataset: SpatialDataset) -> FovGeometry:
    centroids = np.array([f.centroid for f in dataset.fovs], dtype=float)
    diff = centroids[:, None, :] - centroids[None, :, :]
    return FovGeometry(centroids, np.sqrt((diff ** 2).sum(axis=-1)))
