"""Multi-resolution spatially varying Gaussian graphical models fitted by variational Bayes."""

from .api import Analysis, analyze
from .basis import GPBasis, build_basis, eigenpairs_1d, eigenpairs_2d, mse_kernel
from .data import (FovBlock, FovGeometry, Hyperparams, SpatialDataset, fov_geometry,
                   load_dataset, save_dataset, scale_coordinates)
from .engine import FitResult, NodeVariationalState, WorkBuffers, fit, run_node
from .metrics import ConfusionMetrics, score
from .postprocess import NetworkEstimate, postprocess
from .priors import FovPrior, build_prior
from .simulate import GroundTruth, SimConfig

__version__ = "0.1.0"
