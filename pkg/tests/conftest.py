import numpy as np
import pytest

from msgr import Hyperparams, SimConfig, analyze
from msgr.simulate import simulate


@pytest.fixture(scope="session")
def small_sim():
    cfg = SimConfig(p=6, grid_rows=2, grid_cols=2, n_cells=120, sparsity=0.25, seed=11)
    return simulate(cfg) + (cfg,)


@pytest.fixture(scope="session")
def small_analysis(small_sim):
    ds, truth, cfg = small_sim
    return analyze(ds, Hyperparams())


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
