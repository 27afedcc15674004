"""Command-line entry point: ``fjmpls {simulate,calibrate,fit,select,bench,evaluate}``.

Every command reads a YAML config (``--config``); ``--seed``, ``--out``,
``--threads``, ``--estimator`` and ``--scenario`` override the matching keys.
Exit codes: 0 success, 2 invalid input, 3 fit did not converge, 4 some
benchmark fits failed.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .funcdata import DatasetError, load_dataset, read_function, write_dataset, write_function
from .fplsdriver import FitError, FplsConfig, fit_fpca, fit_fpls, load_fit, save_fit, select_p
from .jointmodel import EmConfig, EmError
from .simbench import (ESTIMATORS, BenchSettings, calibrate_c0, censoring_rate, c_index,
                       long_format, mse_functional, rows_to_csv, run_replications, risk_scores,
                       scenario, simulate_dataset, summarize, _latent_draws)

logger = logging.getLogger("fjmpls")

EXIT_OK, EXIT_INVALID, EXIT_NONCONVERGED, EXIT_PARTIAL = 0, 2, 3, 4
FIT_ESTIMATORS = ("fpls", "fpca", "flcrm", "r1", "r2")
FULL_SCALE_DIMS = (300, 300)
FULL_SCALE_N = (200, 500)
FULL_SCALE_REPS = 1000


class ConfigError(ValueError):
    """Invalid configuration or command-line input."""


@dataclass
class RunConfig:
    """Merged configuration of one command invocation."""

    command: str
    values: dict = field(default_factory=dict)
    out: Path = Path(".")
    seed: int | None = None
    threads: int = 1

    def get(self, key, default=None):
        return self.values.get(key, default)

    def require(self, key):
        if key not in self.values:
            raise ConfigError(f"config key '{key}' is required for '{self.command}'")
        return self.values[key]

    def path(self, key) -> Path:
        p = Path(self.require(key))
        if not p.is_absolute() and "_config_dir" in self.values:
            p = Path(self.values["_config_dir"]) / p
        if not p.exists():
            raise ConfigError(f"{key}: path {p} does not exist")
        return p


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc) -> None:
    _write_text(path, json.dumps(doc, indent=1, allow_nan=True) + "\n")


def _int(value, name, minimum=None) -> int:
    try:
        out = int(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name} must be an integer, got {value!r}") from None
    if out != value and not isinstance(value, str):
        raise ConfigError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and out < minimum:
        raise ConfigError(f"{name} must be >= {minimum}, got {out}")
    return out


def _scenario_spec(cfg: RunConfig, n=None):
    name = cfg.get("scenario", "one")
    if name not in ("one", "two"):
        raise ConfigError(f"scenario must be 'one' or 'two', got {name!r}")
    if cfg.seed is None:
        raise ConfigError("a seed is required (config 'seed' or --seed)")
    dims = cfg.get("dims", [60, 60])
    if not (isinstance(dims, (list, tuple)) and len(dims) == 2):
        raise ConfigError(f"dims must be a list of two integers, got {dims!r}")
    kwargs = {}
    if "target_censoring" in cfg.values:
        kwargs["target_censoring"] = float(cfg.get("target_censoring"))
    if cfg.get("c0") is not None:
        kwargs["c0"] = float(cfg.get("c0"))
    if cfg.get("eigen_seed") is not None:
        kwargs["eigen_seed"] = _int(cfg.get("eigen_seed"), "eigen_seed")
    n = n if n is not None else _int(cfg.get("n", 200), "n", 1)
    try:
        return scenario(name, n=n, dims=[_int(v, "dims", 3) for v in dims], seed=cfg.seed, **kwargs)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _fpls_config(cfg: RunConfig, estimator: str) -> FplsConfig:
    variant = "fpls" if estimator == "fpca" else estimator
    em = EmConfig(max_iter=_int(cfg.get("em_max_iter", 200), "em_max_iter", 1),
                  tol=float(cfg.get("em_tol", 1e-8)))
    try:
        return FplsConfig(p0=_int(cfg.get("p0", 2), "p0", 1), p1=_int(cfg.get("p1", 2), "p1", 1),
                          kappa0=float(cfg.get("kappa0", 1e-6)),
                          max_outer_iters=_int(cfg.get("max_outer_iters", 100), "max_outer_iters", 1),
                          step_rule=cfg.get("step_rule", "harmonic"),
                          image_scale=cfg.get("image_scale", "auto"), em_config=em, variant=variant)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _estimator(cfg: RunConfig) -> str:
    est = cfg.get("estimator", "fpls")
    if est not in FIT_ESTIMATORS:
        raise ConfigError(f"estimator must be one of {FIT_ESTIMATORS}, got {est!r}")
    return est


def _grid(cfg: RunConfig, default=None) -> list[tuple[int, int]]:
    spec = cfg.get("grid", default)
    if spec is None:
        raise ConfigError("config key 'grid' is required")
    if isinstance(spec, dict):
        p0s, p1s = spec.get("p0"), spec.get("p1")
        if not p0s or not p1s:
            raise ConfigError("grid needs non-empty 'p0' and 'p1' lists")
        pairs = [(a, b) for a in p0s for b in p1s]
    else:
        pairs = [tuple(p) for p in spec]
    if not pairs:
        raise ConfigError("grid is empty")
    for pair in pairs:
        if len(pair) != 2:
            raise ConfigError(f"grid entries must be (p0, p1) pairs, got {pair!r}")
    return [(_int(a, "p0", 1), _int(b, "p1", 1)) for a, b in pairs]


def _load(cfg: RunConfig, key="dataset"):
    try:
        return load_dataset(cfg.path(key))
    except DatasetError as exc:
        raise ConfigError(str(exc)) from exc


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_simulate(cfg: RunConfig) -> int:
    spec = _scenario_spec(cfg)
    data, truth = simulate_dataset(spec)
    out = cfg.out
    write_dataset(data, out / "dataset.yaml")
    write_function(truth.b0, out / "b0_true.json")
    write_function(truth.b1, out / "b1_true.json")
    doc = truth.to_dict()
    doc.update(scenario=spec.scenario, n=spec.n, dims=list(spec.dims), seed=spec.seed,
               censoring=float(1.0 - data.arrays.event.mean()), b0="b0_true.json", b1="b1_true.json")
    _write_json(out / "truth.json", doc)
    return EXIT_OK


def cmd_calibrate(cfg: RunConfig) -> int:
    spec = _scenario_spec(cfg)
    target = float(cfg.get("target_censoring", 0.6))
    n_pilot = _int(cfg.get("n_pilot", 100_000), "n_pilot", 100)
    try:
        c0 = calibrate_c0(spec, target, n_pilot)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    check = _latent_draws(spec, np.random.default_rng(cfg.seed), n_pilot)[4]
    _write_json(cfg.out / "calibration.json",
                {"scenario": spec.scenario, "n": spec.n, "target": target, "c0": c0,
                 "n_pilot": n_pilot, "check_seed": cfg.seed,
                 "check_rate": censoring_rate(check, c0)})
    return EXIT_OK


def cmd_fit(cfg: RunConfig) -> int:
    est = _estimator(cfg)
    data = _load(cfg)
    fc = _fpls_config(cfg, est)
    result = (fit_fpca if est == "fpca" else fit_fpls)(data, fc)
    save_fit(result, cfg.out)
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_select(cfg: RunConfig) -> int:
    est = _estimator(cfg)
    data = _load(cfg)
    grid = _grid(cfg)
    fc = _fpls_config(cfg, est)
    pair, surface, result = select_p(data, grid, fc, fitter=fit_fpca if est == "fpca" else fit_fpls)
    lines = ["p0,p1,bic,loglik,converged,error"]
    for r in surface:
        lines.append(f"{r['p0']},{r['p1']},{r['bic']!r},{r['loglik']!r},{r['converged']},"
                     f"\"{r['error']}\"")
    _write_text(cfg.out / "bic_surface.csv", "\n".join(lines) + "\n")
    _write_json(cfg.out / "selection.json", {"p0": pair[0], "p1": pair[1], "estimator": est})
    save_fit(result, cfg.out)
    return EXIT_OK if result.converged else EXIT_NONCONVERGED


def cmd_bench(cfg: RunConfig, full_scale: bool = False) -> int:
    if full_scale:
        cfg.values.setdefault("n", list(FULL_SCALE_N))
        cfg.values["dims"] = list(FULL_SCALE_DIMS)
        cfg.values.setdefault("reps", FULL_SCALE_REPS)
    ns = cfg.get("n", 200)
    ns = [_int(v, "n", 2) for v in (ns if isinstance(ns, list) else [ns])]
    reps = _int(cfg.get("reps", 1), "reps", 1)
    estimators = cfg.get("estimators", ["fpls", "fpca"])
    if isinstance(estimators, str):
        estimators = [estimators]
    bad = set(estimators) - set(ESTIMATORS)
    if bad:
        raise ConfigError(f"unknown estimators {sorted(bad)}; choose from {ESTIMATORS}")
    settings = BenchSettings(p0=_int(cfg.get("p0", 3), "p0", 1), p1=_int(cfg.get("p1", 3), "p1", 1),
                             grid=tuple(_grid(cfg)) if cfg.get("grid") else (),
                             max_outer_iters=_int(cfg.get("max_outer_iters", 100), "max_outer_iters", 1),
                             kappa0=float(cfg.get("kappa0", 1e-6)))
    specs = [_scenario_spec(cfg, n) for n in ns]
    rows = []
    for spec in specs:
        rows.extend(run_replications(spec, estimators, reps, cfg.threads, settings))
    out = cfg.out
    _write_text(out / "results.csv", rows_to_csv(rows))
    summary = {str(spec.n): summarize([r for r in rows if r["n"] == spec.n]) for spec in specs}
    _write_json(out / "summary.json", summary)
    _write_text(out / "plot_data.csv", long_format(rows))
    failed = any(not math.isfinite(r["mse_b0"]) for r in rows)
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_evaluate(cfg: RunConfig) -> int:
    data = _load(cfg)
    try:
        params, doc = load_fit(cfg.path("fit"))
    except (OSError, KeyError, json.JSONDecodeError, DatasetError) as exc:
        raise ConfigError(f"cannot read fit: {exc}") from exc
    longi = doc.get("variant") != "flcrm"
    report = {"variant": doc.get("variant"), "n": data.n,
              "cindex": c_index(risk_scores(params, data, longi), data.arrays.T, data.arrays.event)}
    if cfg.get("truth"):
        tpath = cfg.path("truth")
        tdoc = json.loads(tpath.read_text())
        report["mse_b0"] = mse_functional(params.b0, read_function(tpath.parent / tdoc["b0"]))
        report["mse_b1"] = mse_functional(params.b1, read_function(tpath.parent / tdoc["b1"]))
    _write_json(cfg.out / "evaluation.json", report)
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "calibrate": cmd_calibrate, "fit": cmd_fit,
            "select": cmd_select, "bench": cmd_bench, "evaluate": cmd_evaluate}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fjmpls", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML configuration file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory (default: current)")
        p.add_argument("--threads", type=int, help="worker processes (default: $FJM_THREADS or 1)")
        p.add_argument("--estimator", choices=sorted(set(FIT_ESTIMATORS) | set(ESTIMATORS)))
        p.add_argument("--scenario", choices=["one", "two"])
        p.add_argument("--paper-scale", action="store_true",
                       help="300 x 300 images, n in {200, 500}, 1000 replications")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _run_config(args) -> RunConfig:
    values = {}
    if args.config is not None:
        try:
            loaded = yaml.safe_load(args.config.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a mapping")
        values.update(loaded)
        values["_config_dir"] = str(args.config.parent)
    if args.estimator is not None:
        values["estimator"] = args.estimator
        values.setdefault("estimators", [args.estimator])
    if args.scenario is not None:
        values["scenario"] = args.scenario
    if args.paper_scale:
        values["dims"] = list(FULL_SCALE_DIMS)
    seed = args.seed if args.seed is not None else values.get("seed")
    threads = args.threads if args.threads is not None else values.get(
        "threads", os.environ.get("FJM_THREADS", 1))
    out = args.out if args.out is not None else Path(values.get("out", "."))
    return RunConfig(args.command, values, Path(out),
                     None if seed is None else _int(seed, "seed"), _int(threads, "threads", 1))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _run_config(args)
        if args.command == "bench":
            return cmd_bench(cfg, args.paper_scale)
        return COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"fjmpls {args.command}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (FitError, EmError) as exc:
        print(f"fjmpls {args.command}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED


if __name__ == "__main__":
    sys.exit(main())
