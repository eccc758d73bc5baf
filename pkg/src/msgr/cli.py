"""Command-line front end: ``simulate``, ``fit``, ``evaluate`` and ``pipeline``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .api import analyze
from .data import Hyperparams, load_dataset
from .errors import ConfigError, DataError, MsgrError
from .metrics import score
from .postprocess import connectivity_summaries, surfaces_frame
from .simulate import SimConfig, edges_from_frame, simulate, write_simulation

# flag -> Hyperparams field
HP_FLAGS = {
    "alpha": "alpha_fdr", "degree": "degree", "a_gp": "a_gp", "b_gp": "b_gp",
    "sigma_gp": "sigma_gp_sq", "a_omega": "a_omega", "b_omega": "b_omega", "rho": "rho_decay",
    "sigma_lambda": "sigma_lambda_sq", "tol": "tol", "max_iter": "max_iter",
    "learning_rate": "learning_rate",
}
SIM_FLAGS = ("p", "grid_rows", "grid_cols", "n_cells", "rho_sim", "sparsity", "fov_size",
             "fov_spacing", "candidate_grid", "scenario")


class StageError(Exception):
    def __init__(self, stage, err):
        super().__init__(f"[{stage}] {err}")
        self.exit_code = getattr(err, "exit_code", 3 if isinstance(err, OSError) else 1)


def _stage(name, fn, *args, **kw):
    try:
        return fn(*args, **kw)
    except (MsgrError, OSError) as e:
        raise StageError(name, e) from e
    except (ValueError, KeyError, pd.errors.ParserError) as e:
        raise StageError(name, DataError(str(e))) from e


# ---------------------------------------------------------------------------
# configuration


def _load_json(path):
    if path is None:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    return doc


def resolve_hyperparams(args, doc) -> Hyperparams:
    hp = dict(doc.get("hyperparams", {}))
    for flag, name in HP_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            hp[name] = v
    try:
        return Hyperparams.from_dict(hp)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def resolve_sim(args, doc) -> SimConfig:
    sim = dict(doc.get("sim", {}))
    for flag in SIM_FLAGS:
        v = getattr(args, flag, None)
        if v is not None:
            sim["rho_decay" if flag == "rho_sim" else flag] = v
    seed = args.seed if args.seed is not None else doc.get("seed", sim.get("seed", 0))
    sim["seed"] = int(seed)
    try:
        return SimConfig(**sim)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def _threads(args, doc) -> int:
    t = args.threads if args.threads is not None else doc.get("threads", 1)
    if int(t) != t or t < 1:
        raise ConfigError(f"threads must be a positive integer, got {t!r}")
    return int(t)


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(args, doc=None) -> Path:
    doc = _load_json(args.config) if doc is None else doc
    cfg = resolve_sim(args, doc)
    out = Path(args.out)
    ds, truth = _stage("simulate", simulate, cfg)
    _stage("write", write_simulation, ds, truth, cfg, out)
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _versions() -> dict:
    return {"msgr": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "pandas": pd.__version__, "python": platform.python_version()}


def cmd_fit(args, doc=None) -> Path:
    doc = _load_json(args.config) if doc is None else doc
    hp = resolve_hyperparams(args, doc)
    threads = _threads(args, doc)
    paths = doc.get("paths", {})
    expr = args.expression or paths.get("expression")
    coords = args.coords or paths.get("coords")
    regions = args.regions or paths.get("regions")
    if not expr or not coords:
        raise ConfigError("fit needs --expression and --coords")
    out = Path(args.out)
    ds = _stage("load", load_dataset, expr, coords, regions_path=regions)
    verbose = bool(args.verbose or doc.get("verbose", False))
    res = _stage("fit", analyze, ds, hp, threads=threads, verbose=verbose)
    est = res.estimate

    def write():
        out.mkdir(parents=True, exist_ok=True)
        est.edges_frame().to_csv(out / "edges.csv", index=False)
        est.pip_frame().to_csv(out / "pip.csv", index=False)
        pathways = _load_json(args.pathways) if getattr(args, "pathways", None) else None
        deg, cs = connectivity_summaries(est, pathways)
        deg.to_csv(out / "degree.csv", index=False)
        cs.to_csv(out / "cs.csv", index=False)
        if args.surfaces:
            cells = {f.fov_id: f.cell_ids for f in res.scaled.fovs}
            surfaces_frame(est, cells).to_csv(out / "surfaces.csv", index=False)
        (out / "fit.json").write_text(res.fit.to_json())
        manifest = {
            "command": "fit",
            "inputs": {"expression": str(expr), "coords": str(coords),
                       "regions": None if regions is None else str(regions),
                       "sha256": {"expression": _sha256(expr), "coords": _sha256(coords)}},
            "hyperparams": hp.to_dict(),
            "rho_decay_used": res.rho_decay,
            "seed": args.seed if args.seed is not None else doc.get("seed"),
            "threads": threads,
            "gene_names": list(ds.gene_names),
            "fov_ids": [int(f) for f in ds.fov_ids],
            "kappa": est.kappa,
            "n_edges": int(sum(len(e) for e in est.edges)),
            "convergence": res.fit.convergence_report(),
            "versions": _versions(),
            "surface_sign": "omega_ij = -sum_l u_l B_l(s); rho_ij = -omega_ij / sqrt(omega_ii omega_jj)",
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")

    _stage("write", write)
    if verbose:
        print(f"fit: {manifest_summary(res)}", file=sys.stderr)
    return out


def manifest_summary(res) -> str:
    return (f"{sum(len(e) for e in res.estimate.edges)} edges, kappa={res.estimate.kappa:.4f}, "
            f"converged={res.fit.all_converged}")


def _edges_path(p, name):
    p = Path(p)
    return p / name if p.is_dir() else p


def _evaluate_one(est_path, truth_path):
    est_file = _edges_path(est_path, "edges.csv")
    truth_file = _edges_path(truth_path, "truth_edges.csv")
    manifest = json.loads((est_file.parent / "manifest.json").read_text())
    genes, fovs = manifest["gene_names"], manifest["fov_ids"]
    est_edges = edges_from_frame(pd.read_csv(est_file), genes, fovs, est_file)
    truth_edges = edges_from_frame(pd.read_csv(truth_file), genes, fovs, truth_file)
    m = score(est_edges, truth_edges, len(genes), len(fovs))
    row = {"estimate": str(est_file), "truth": str(truth_file)}
    cfg_file = truth_file.parent / "config.json"
    if cfg_file.exists():
        sim = json.loads(cfg_file.read_text())
        row["seed"] = sim.get("seed")
        for key in ("scenario", "p", "n_cells", "rho_decay", "sparsity", "grid_rows", "grid_cols"):
            row[key] = sim["config"].get(key)
    row.update(m.to_dict())
    return row


def cmd_evaluate(args, doc=None) -> Path:
    est, truth = list(args.estimate), list(args.truth)
    if len(est) != len(truth):
        raise ConfigError(f"{len(est)} estimates but {len(truth)} truth files")
    rows = [_stage("evaluate", _evaluate_one, e, t) for e, t in zip(est, truth)]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "metrics.csv"
    df = pd.DataFrame(rows)
    if path.exists():
        df = pd.concat([pd.read_csv(path), df], ignore_index=True)
    _stage("write", df.to_csv, path, index=False)
    return path


def cmd_pipeline(args, doc=None) -> Path:
    doc = _load_json(args.config) if doc is None else doc
    out = Path(args.out)
    sim_dir, fit_dir = out / "sim", out / "fit"
    sim_args = argparse.Namespace(**{**vars(args), "out": str(sim_dir)})
    cmd_simulate(sim_args, doc)
    fit_args = argparse.Namespace(**{**vars(args), "out": str(fit_dir),
                                     "expression": str(sim_dir / "expression.csv"),
                                     "coords": str(sim_dir / "coords.csv")})
    cmd_fit(fit_args, doc)
    ev_args = argparse.Namespace(estimate=[str(fit_dir)], truth=[str(sim_dir)], out=str(out))
    return cmd_evaluate(ev_args, doc)


# ---------------------------------------------------------------------------
# parser


def _add_hp(p):
    g = p.add_argument_group("model")
    g.add_argument("--alpha", type=float, help="Bayesian FDR level")
    g.add_argument("--degree", type=int, help="total degree of the 2-D eigenbasis")
    g.add_argument("--a-gp", dest="a_gp", type=float)
    g.add_argument("--b-gp", dest="b_gp", type=float)
    g.add_argument("--sigma-gp", dest="sigma_gp", type=float, help="GP variance sigma_gp^2")
    g.add_argument("--a-omega", dest="a_omega", type=float)
    g.add_argument("--b-omega", dest="b_omega", type=float)
    g.add_argument("--rho", type=float, help="FOV decay of the selection prior (default 0.6)")
    g.add_argument("--estimate-rho", action="store_true",
                   help="estimate the decay from the data instead of using --rho")
    g.add_argument("--sigma-lambda", dest="sigma_lambda", type=float,
                   help="selection prior variance sigma_Lambda^2")
    g.add_argument("--tol", type=float)
    g.add_argument("--max-iter", dest="max_iter", type=int)
    g.add_argument("--learning-rate", dest="learning_rate", type=float)
    g.add_argument("--threads", type=int)
    g.add_argument("--surfaces", action="store_true", help="write per-cell surfaces.csv")
    g.add_argument("--pathways", help="JSON object mapping pathway name to a gene list")


def _add_sim(p):
    g = p.add_argument_group("simulation")
    g.add_argument("--scenario", choices=["I", "II"])
    g.add_argument("--p", type=int, help="number of genes")
    g.add_argument("--grid-rows", dest="grid_rows", type=int)
    g.add_argument("--grid-cols", dest="grid_cols", type=int)
    g.add_argument("--n-cells", dest="n_cells", type=int, help="cells per FOV")
    g.add_argument("--rho-sim", dest="rho_sim", type=float, help="FOV decay used to simulate")
    g.add_argument("--sparsity", type=float)
    g.add_argument("--fov-size", dest="fov_size", type=float)
    g.add_argument("--fov-spacing", dest="fov_spacing", type=float)
    g.add_argument("--candidate-grid", dest="candidate_grid", type=int)


def _add_common(p):
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="JSON run configuration; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="msgr", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"msgr {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset with known truth")
    _add_common(s)
    _add_sim(s)

    f = sub.add_parser("fit", help="fit a dataset and write the network estimate")
    _add_common(f)
    f.add_argument("--expression")
    f.add_argument("--coords")
    f.add_argument("--regions")
    _add_hp(f)

    e = sub.add_parser("evaluate", help="score fitted edge lists against truth")
    e.add_argument("--estimate", nargs="+", required=True,
                   help="fit output directories or edges.csv files")
    e.add_argument("--truth", nargs="+", required=True,
                   help="simulation directories or truth_edges.csv files")
    e.add_argument("--out", required=True)
    e.add_argument("--config")

    pl = sub.add_parser("pipeline", help="simulate, fit and evaluate in one go")
    _add_common(pl)
    _add_sim(pl)
    _add_hp(pl)
    pl.set_defaults(expression=None, coords=None, regions=None)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if getattr(args, "estimate_rho", False):
            doc = _load_json(args.config)
            doc.setdefault("hyperparams", {})["rho_decay"] = None
            if args.rho is not None:
                raise ConfigError("--rho and --estimate-rho are mutually exclusive")
        else:
            doc = None
        if args.command == "simulate":
            cmd_simulate(args, doc)
        elif args.command == "fit":
            cmd_fit(args, doc)
        elif args.command == "evaluate":
            cmd_evaluate(args)
        else:
            cmd_pipeline(args, doc)
    except (StageError, MsgrError) as e:
        print(f"error: {e}", file=sys.stderr)
        return int(getattr(e, "exit_code", 1))
    return 0


if __name__ == "__main__":
    sys.exit(main())
