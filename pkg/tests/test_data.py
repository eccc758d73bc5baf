import numpy as np
import pandas as pd
import pytest

from msgr.data import (FovBlock, Hyperparams, SpatialDataset, fov_geometry, load_dataset,
                       save_dataset, scale_coordinates)
from msgr.errors import (ConfigError, DegenerateGeometry, MissingColumn, NonFiniteValue,
                         ShapeMismatch)


def _two_fovs(rng):
    a = FovBlock(0, rng.uniform(0, 1, (20, 2)), rng.standard_normal((20, 3)))
    b = FovBlock(1, rng.uniform(5, 6, (15, 2)), rng.standard_normal((15, 3)),
                 cell_ids=np.arange(100, 115))
    return SpatialDataset([a, b], ["x1", "x2", "x3"])


def test_scaled_coordinates_have_unit_pooled_sd_and_zero_means(rng):
    sc = scale_coordinates(_two_fovs(rng))
    allc = np.concatenate([f.coordinates for f in sc.fovs])
    assert np.std(allc) == pytest.approx(1.0, abs=1e-12)
    for f in sc.fovs:
        assert np.abs(f.coordinates.mean(axis=0)).max() < 1e-12


def test_scaling_keeps_original_centroids(rng):
    ds = _two_fovs(rng)
    sc = scale_coordinates(ds)
    for f0, f1 in zip(ds.fovs, sc.fovs):
        np.testing.assert_array_equal(f0.centroid, f1.centroid)


def test_scaling_is_idempotent(rng):
    once = scale_coordinates(_two_fovs(rng))
    twice = scale_coordinates(once)
    for f1, f2 in zip(once.fovs, twice.fovs):
        np.testing.assert_allclose(f1.coordinates, f2.coordinates, atol=1e-12)


def test_degenerate_geometry():
    f = FovBlock(0, np.ones((4, 2)), np.zeros((4, 2)))
    with pytest.raises(DegenerateGeometry):
        scale_coordinates(SpatialDataset([f], ["a", "b"]))


def test_geometry_distances():
    fovs = [FovBlock(k, np.array([[x, 0.0], [x + 0.4, 0.4]]), np.zeros((2, 2)))
            for k, x in enumerate([0.0, 1.0, 3.0])]
    geo = fov_geometry(SpatialDataset(fovs, ["a", "b"]))
    np.testing.assert_allclose(geo.distances[0], [0, 1, 3])
    np.testing.assert_allclose(geo.distances, geo.distances.T)


def test_block_validation(rng):
    with pytest.raises(ShapeMismatch):
        FovBlock(0, rng.standard_normal((5, 2)), rng.standard_normal((4, 3)))
    x = rng.standard_normal((5, 3))
    x[2, 1] = np.nan
    with pytest.raises(NonFiniteValue, match="cell 2"):
        FovBlock(0, rng.standard_normal((5, 2)), x)


def test_csv_round_trip(tmp_path, rng):
    ds = _two_fovs(rng)
    save_dataset(ds, tmp_path / "e.csv", tmp_path / "c.csv")
    back = load_dataset(tmp_path / "e.csv", tmp_path / "c.csv")
    assert back.gene_names == ds.gene_names
    for f0, f1 in zip(ds.fovs, back.fovs):
        np.testing.assert_allclose(f0.expression, f1.expression)
        np.testing.assert_allclose(f0.coordinates, f1.coordinates)


def test_missing_column(tmp_path, rng):
    ds = _two_fovs(rng)
    save_dataset(ds, tmp_path / "e.csv", tmp_path / "c.csv")
    pd.read_csv(tmp_path / "c.csv").drop(columns="y").to_csv(tmp_path / "c.csv", index=False)
    with pytest.raises(MissingColumn):
        load_dataset(tmp_path / "e.csv", tmp_path / "c.csv")


def test_hyperparams_defaults_and_validation():
    hp = Hyperparams()
    assert (hp.a_omega, hp.b_omega, hp.sigma_gp_sq, hp.a_gp, hp.b_gp, hp.degree) == (10, 10, 1, 0.01, 0.5, 10)
    assert hp.n_basis == 66
    assert Hyperparams.from_dict(hp.to_dict()) == hp
    with pytest.raises(ConfigError):
        Hyperparams(rho_decay=1.0)
    with pytest.raises(ConfigError):
        Hyperparams.from_dict({"nonsense": 1})
