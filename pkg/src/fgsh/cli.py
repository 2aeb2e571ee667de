"""Command-line runner: ``fgsh run <config.toml>``, ``fgsh verify``, ``fgsh list-models``.

Configuration (TOML)::

    [model]                 # required
    name = "spin_boson"     # see `fgsh list-models`
    omega = 1.0
    c = 1.0
    epsilon = 0.05
    delta = 1e-3            # optional when run.delta_list is given

    [run]                   # required
    backend = "spectral"    # mc | single_hop | spectral | stationary | strong
    z0 = [-1.0, 0.0]
    t = 2.0
    delta_list = [1e-3, 2e-3, 4e-3, 8e-3]   # optional sweep
    seed = 0
    workers = 0             # 0 = all CPUs
    output_dir = "out"      # FGSH_OUT overrides

    [ensemble]              # mc backend: N, dt, grid_points, chunk_size
    [quadrature]            # single_hop backend: nz, nt, dt, gate
    [grid]                  # evaluation grid for mc / single_hop: lo, hi, points
    [spectral]              # spectral / strong backends: half_width, points, dt, self_check

Outputs (all floats written with ``repr``):

* ``wavefunction.csv``: x..., re_u0, im_u0, re_u1, im_u1, se_u0, se_u1 (mc)
* ``u1.csv``: x..., re_u1, im_u1 (single_hop without a sweep)
* ``populations.csv``: t, pop0, pop1 (spectral without a sweep)
* ``sweep.csv``: delta, k, backend, converged, s (one fit row with delta = "fit")
* ``strong.csv``: delta, E, pop0, pop_deviation, mass_drift
* ``stationary.json``: stationary-phase report
* ``manifest.json``: config echo, seed, versions, wall time and summary numbers

Exit status: 0 on success, 2 for configuration errors, 1 for failures
inside a module.  Errors are printed to stderr as a JSON record.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import inspect
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy
import tomli

from . import checks
from .mc_estimator import EnsembleSpec, EvaluationGrid, estimate_wavefunction, population
from .model import get_model, list_models, model_factory
from .reference import SpectralGrid, initial_field, population_series, strong_coupling_experiment
from .single_hop import SingleHopQuadratureSpec, marcus_sweep, transition_rate
from .stationary_phase import stationary_report

logger = logging.getLogger("fgsh")

BACKENDS = ("mc", "single_hop", "spectral", "stationary", "strong")

_SECTIONS = {
    "model": None,  # keys checked against the model factory
    "run": {"backend", "z0", "t", "delta_list", "seed", "workers", "output_dir"},
    "ensemble": {"N", "dt", "grid_points", "chunk_size"},
    "quadrature": {"nz", "nt", "dt", "gate"},
    "grid": {"lo", "hi", "points"},
    "spectral": {"half_width", "points", "dt", "self_check"},
}


class ConfigError(ValueError):
    def __init__(self, message: str, key: str = ""):
        super().__init__(message)
        self.key = key


# -- config ------------------------------------------------------------------------

def _require(table: dict, key: str, section: str):
    if key not in table:
        raise ConfigError(f"missing required key '{section}.{key}'", f"{section}.{key}")
    return table[key]


def load_config(path) -> dict:
    try:
        with open(path, "rb") as fh:
            cfg = tomli.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from None
    validate_config(cfg)
    return cfg


def _model_kwargs(model_cfg: dict) -> dict:
    kw = {k: v for k, v in model_cfg.items() if k != "name"}
    if "epsilon" in kw:
        kw["eps"] = kw.pop("epsilon")
    return kw


def validate_config(cfg: dict) -> None:
    """Reject unknown sections/keys and missing required entries before any computation."""
    for section in cfg:
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]", section)
    model_cfg = _require(cfg, "model", "config")
    name = _require(model_cfg, "name", "model")
    if name not in list_models():
        raise ConfigError(f"unknown model {name!r}; available: {list_models()}", "model.name")
    run = _require(cfg, "run", "config")
    for section, allowed in _SECTIONS.items():
        if allowed is None or section not in cfg:
            continue
        for key in cfg[section]:
            if key not in allowed:
                raise ConfigError(f"unknown key '{section}.{key}'", f"{section}.{key}")
    backend = _require(run, "backend", "run")
    if backend not in BACKENDS:
        raise ConfigError(f"unknown backend {backend!r}; expected one of {BACKENDS}", "run.backend")
    _require(run, "z0", "run")
    _require(run, "t", "run")
    _require(model_cfg, "epsilon", "model")
    if "delta" not in model_cfg and "delta_list" not in run:
        raise ConfigError("either model.delta or run.delta_list is required", "model.delta")

    # the factory signature defines the accepted model keys
    params = inspect.signature(model_factory(name)).parameters
    for key in _model_kwargs(model_cfg):
        if key not in params:
            raise ConfigError(f"unknown key 'model.{key}' for model {name!r}", f"model.{key}")
    if backend == "mc" and "ensemble" in cfg and "N" not in cfg["ensemble"]:
        raise ConfigError("missing required key 'ensemble.N'", "ensemble.N")


def build_model(cfg: dict, delta=None):
    kw = _model_kwargs(cfg["model"])
    if delta is not None:
        kw["delta"] = delta
    elif "delta" not in kw:
        kw["delta"] = float(cfg["run"]["delta_list"][0])
    return get_model(cfg["model"]["name"], **kw)


def _spectral_grid(cfg, model) -> SpectralGrid:
    sp = cfg.get("spectral", {})
    return SpectralGrid.uniform(model.dim, float(sp.get("half_width", 8.0)), int(sp.get("points", 1024)),
                                float(sp.get("dt", 1e-3)), model.eps)


def _eval_grid(cfg, d):
    g = cfg.get("grid")
    if not g:
        return None
    pts = g.get("points", 512)
    return EvaluationGrid(tuple(np.broadcast_to(g["lo"], (d,))), tuple(np.broadcast_to(g["hi"], (d,))),
                          tuple(np.broadcast_to(pts, (d,))))


# -- output helpers ------------------------------------------------------------------

def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _versions():
    from importlib.metadata import PackageNotFoundError, version
    try:
        pkg = version("artifact")
    except PackageNotFoundError:
        pkg = "unknown"
    return {"fgsh": pkg, "python": platform.python_version(), "numpy": np.__version__, "scipy": scipy.__version__}


# -- backends --------------------------------------------------------------------------

def _sweep_rows(res):
    rows = [(d, k, res.backend, c, "") for d, k, c in zip(res.deltas, res.rates, res.converged)]
    rows.append(("fit", res.prefactor, res.backend, bool(res.converged.all()), res.exponent))
    return rows


def _run_sweep(cfg, out: Path, backend: str) -> dict:
    run = cfg["run"]
    model = build_model(cfg)
    z0 = np.asarray(run["z0"], dtype=float)
    t = float(run["t"])
    kwargs = {}
    if backend == "single_hop":
        kwargs["quadrature"] = _quadrature_spec(cfg, t, model.dim)
    elif backend == "spectral":
        kwargs["spectral_grid"] = _spectral_grid(cfg, model)
        kwargs["spectral_self_check"] = bool(cfg.get("spectral", {}).get("self_check", False))
    elif backend == "mc":
        kwargs["ensemble"] = _ensemble_spec(cfg, t, z0, model.dim)
    else:
        raise ConfigError(f"backend {backend!r} does not support delta_list", "run.delta_list")
    res = marcus_sweep(model, run["delta_list"], z0, t, backend=backend, **kwargs)
    write_csv(out / "sweep.csv", ["delta", "k", "backend", "converged", "s"], _sweep_rows(res))
    return {"exponent": res.exponent, "prefactor": res.prefactor, "fit_residual": res.residual,
            "rates": res.rates.tolist(), "deltas": res.deltas.tolist()}


def _quadrature_spec(cfg, t, d):
    q = cfg.get("quadrature", {})
    return SingleHopQuadratureSpec(nz=int(q.get("nz", 24)), nt=int(q.get("nt", 48)), t=t,
                                   grid=_eval_grid(cfg, d), dt=float(q.get("dt", 2e-3)))


def _ensemble_spec(cfg, t, z0, d):
    e = cfg.get("ensemble", {})
    run = cfg["run"]
    return EnsembleSpec(N=int(e.get("N", 10_000)), seed=int(run.get("seed", 0)), t=t, z0=tuple(z0),
                        grid=_eval_grid(cfg, d), grid_points=int(e.get("grid_points", 512)),
                        dt=e.get("dt"), workers=int(run.get("workers", 0)),
                        chunk_size=int(e.get("chunk_size", 4096)))


def _run_mc(cfg, out: Path) -> dict:
    run = cfg["run"]
    model = build_model(cfg)
    z0 = np.asarray(run["z0"], dtype=float)
    spec = _ensemble_spec(cfg, float(run["t"]), z0, model.dim)
    est = estimate_wavefunction(spec, model)
    x = est.grid.points()
    header = [f"x{j}" for j in range(x.shape[1])] + ["re_u0", "im_u0", "re_u1", "im_u1", "se_u0", "se_u1"]
    rows = (list(x[i]) + [est.u0[i].real, est.u0[i].imag, est.u1[i].real, est.u1[i].imag,
                          est.stderr[0, i], est.stderr[1, i]] for i in range(x.shape[0]))
    write_csv(out / "wavefunction.csv", header, rows)
    p0, e0 = population(est, 0)
    p1, e1 = population(est, 1)
    return {"C_N": est.C_N, "dropped": est.dropped, "N": est.N, "population0": [p0, e0],
            "population1": [p1, e1], "aggregate_stderr": est.aggregate_stderr(),
            "grid_warning": est.grid_warning, **est.meta}


def _run_single_hop(cfg, out: Path) -> dict:
    run = cfg["run"]
    model = build_model(cfg)
    z0 = np.asarray(run["z0"], dtype=float)
    gate = bool(cfg.get("quadrature", {}).get("gate", True))
    res = transition_rate(_quadrature_spec(cfg, float(run["t"]), model.dim), model, z0, gate=gate)
    f = res.field
    x = f.grid.points()
    header = [f"x{j}" for j in range(x.shape[1])] + ["re_u1", "im_u1"]
    write_csv(out / "u1.csv", header, (list(x[i]) + [f.u1[i].real, f.u1[i].imag] for i in range(x.shape[0])))
    return {"k": res.k, "k_coarse": res.k_coarse, "converged": res.converged, "rel_change": res.rel_change}


def _run_spectral(cfg, out: Path) -> dict:
    run = cfg["run"]
    model = build_model(cfg)
    grid = _spectral_grid(cfg, model)
    t = float(run["t"])
    every = max(1, int(round(0.01 / grid.dt)))
    ts, p0, p1, final = population_series(initial_field(grid, run["z0"]), model, grid, t, every=every)
    write_csv(out / "populations.csv", ["t", "pop0", "pop1"], zip(ts, p0, p1))
    return {"pop0": float(p0[-1]), "pop1": float(p1[-1]), "mass": final.mass(grid)}


def _run_stationary(cfg, out: Path) -> dict:
    run = cfg["run"]
    model = build_model(cfg)
    rep = stationary_report(model, np.asarray(run["z0"], dtype=float), float(run["t"]))
    (out / "stationary.json").write_text(rep.to_json() + "\n")
    return {"t1_star": rep.t1, "leading_order_rate": rep.leading_order_rate, "A": rep.A}


def _run_strong(cfg, out: Path) -> dict:
    run = cfg["run"]
    if "delta_list" not in run:
        raise ConfigError("strong backend needs run.delta_list", "run.delta_list")
    model = build_model(cfg)
    grid = _spectral_grid(cfg, model)
    rows = strong_coupling_experiment(model, run["z0"], float(run["t"]), run["delta_list"], grid)
    write_csv(out / "strong.csv", ["delta", "E", "pop0", "pop_deviation", "mass_drift"],
              ((r.delta, r.error, r.pop0, r.pop_deviation, r.mass_drift) for r in rows))
    errs = [r.error for r in rows]
    return {"E": errs, "E_decreasing": bool(all(b < a for a, b in zip(errs, errs[1:])))}


def run(config_path, out_dir=None) -> int:
    cfg = load_config(config_path)
    run_cfg = cfg["run"]
    out = Path(os.environ.get("FGSH_OUT") or out_dir or run_cfg.get("output_dir", "fgsh_out"))
    out.mkdir(parents=True, exist_ok=True)
    backend = run_cfg["backend"]
    start = time.perf_counter()
    if "delta_list" in run_cfg and backend != "strong":
        summary = _run_sweep(cfg, out, backend)
    else:
        summary = {"mc": _run_mc, "single_hop": _run_single_hop, "spectral": _run_spectral,
                   "stationary": _run_stationary, "strong": _run_strong}[backend](cfg, out)
    manifest = {
        "config": cfg,
        "seed": run_cfg.get("seed", 0),
        "versions": _versions(),
        "wall_time": time.perf_counter() - start,
        "timestamp": _dt.datetime.now(_dt.timezone.utc).isoformat(),
        "summary": summary,
    }
    (out / "manifest.json").write_text(json.dumps(_jsonable(manifest), indent=2) + "\n")
    logger.info("wrote results to %s", out)
    return 0


def verify(seed: int = 0, dt: float = 1e-3) -> int:
    results = checks.run_all(seed=seed, dt=dt)
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def _error(kind: str, message: str, code: int, **extra) -> int:
    record = {"error": kind, "message": message, **extra}
    print(json.dumps(record), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fgsh", description=__doc__.split("\n\n")[0],
                                     epilog=__doc__.split("\n", 2)[2],
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run the experiment described by a TOML config")
    p_run.add_argument("config")
    p_run.add_argument("-o", "--output-dir", default=None)
    p_ver = sub.add_parser("verify", help="run the fast identity suite")
    p_ver.add_argument("--seed", type=int, default=0, help="seed for the randomized checks")
    p_ver.add_argument("--dt", type=float, default=1e-3, help="RK4 step for the symplectic check")
    sub.add_parser("list-models", help="print registered model names")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "list-models":
        for name in list_models():
            print(name)
        return 0
    if args.command == "verify":
        return verify(seed=args.seed, dt=args.dt)
    try:
        return run(args.config, args.output_dir)
    except ConfigError as exc:
        return _error("config", str(exc), 2, key=exc.key)
    except Exception as exc:  # surfaced with context as a machine-readable record
        logger.debug("module failure", exc_info=True)
        return _error(type(exc).__name__, str(exc), 1)


if __name__ == "__main__":
    sys.exit(main())
