"""End-to-end fitting of a dataset: scaling, basis, prior, VB and postprocessing."""

from __future__ import annotations

from dataclasses import dataclass

from .basis import build_basis
from .data import Hyperparams, fov_geometry, scale_coordinates
from .engine import FitResult, fit
from .postprocess import NetworkEstimate, postprocess
from .priors import build_prior, estimate_rho_decay


@dataclass
class Analysis:
    scaled: object
    fit: FitResult
    estimate: NetworkEstimate
    rho_decay: float


def analyze(dataset, hyperparams: Hyperparams | None = None, threads: int = 1,
            verbose: bool = False) -> Analysis:
    hp = Hyperparams() if hyperparams is None else hyperparams
    scaled = scale_coordinates(dataset)
    geo = fov_geometry(scaled)
    rho = hp.rho_decay if hp.rho_decay is not None else estimate_rho_decay(scaled, geo)
    basis = build_basis(scaled, hp.a_gp, hp.b_gp, hp.degree)
    prior = build_prior(geo, hp, rho, scaled.region_labels, scaled.fov_ids)
    res = fit(scaled, hp, prior, basis, threads=threads, verbose=verbose, rho_decay=rho)
    return Analysis(scaled, res, postprocess(res), rho)
