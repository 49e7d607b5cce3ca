"""Command-line experiment runner.

Exit codes: 0 success, 1 a test or benchmark failed, 2 configuration error,
3 numerical failure.  Every run writes CSV outputs plus ``manifest.json``
(config hash, version, seeds, wall-clock per stage, sha256 of each output).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import __version__
from .backward import RegressionBasis, SolverConfig, export_solution, solve_finite_horizon
from .catalog import build_model
from .config import ConfigError, config_hash, emit_config, load_config
from .doss import export_flow, mollify, pde_residual, solve_flow, transform_field
from .forward import (check_flow_property, check_shift_property, ensemble_increments,
                      export_ensemble, export_summary, simulate_forward)
from .horizon import ConvergenceError, Environment, build_stationary_field, stationary_field
from .model import AssumptionError, Box, probe_monotonicity
from .noise import TimeGrid, generate_increments
from .stationarity import (calibrate_scheme_error, crude_stationarity_check, export_reports,
                           law_stationarity_test)

OUTPUT_ROOT_ENV = "BDSDE_OUTPUT_ROOT"
EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2, 3

# files each subcommand may write (besides manifest.json)
OUTPUTS = {
    "check": ["assumptions.csv", "probes.csv"],
    "forward": ["forward_summary.csv", "forward_checks.csv", "forward_ensemble.csv"],
    "solve": ["coefficients.csv", "solution_manifest.json", "solution_nodes.csv", "errors.csv"],
    "stationary": ["field.csv"],
    "doss": ["flow.csv", "field.csv", "transformed.csv", "residual.csv"],
    "test-stationarity": ["reports.csv", "field.csv"],
    "bench": [],
}


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"stage {stage!r} failed: {exc}")
        self.stage = stage
        self.cause = exc


class Run:
    """Bookkeeping for one invocation: output directory, stage timings and seeds."""

    def __init__(self, command: str, cfg: dict, out: Path, workers: int = 1):
        self.command, self.cfg, self.out, self.workers = command, cfg, out, workers
        self.stages: dict[str, float] = {}
        self.seeds: dict[str, object] = {}
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        if self.command != "bench" and name not in OUTPUTS[self.command]:
            raise ValueError(f"{self.command} does not declare output {name}")
        return self.out / name

    @contextmanager
    def stage(self, name: str):
        start = time.perf_counter()
        try:
            yield
        except (ConfigError, StageError):
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc
        finally:
            self.stages[name] = time.perf_counter() - start

    def manifest(self) -> None:
        files = {}
        for p in sorted(self.out.iterdir()):
            if p.is_file() and p.name != "manifest.json":
                files[p.name] = hashlib.sha256(p.read_bytes()).hexdigest()
        doc = {"command": self.command, "version": __version__,
               "config_hash": config_hash(self.cfg), "config": self.cfg,
               "seeds": self.seeds, "wall_clock_seconds": self.stages, "outputs": files}
        (self.out / "manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True))


def _write(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for row in rows:
            wr.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v
                         for v in row])


def _model(cfg):
    m = cfg["model"]
    return build_model(m["name"], m.get("params", {}), cfg["constants"],
                       override=cfg["override_assumptions"])


def _solver(cfg) -> SolverConfig:
    s = cfg["solver"]
    return SolverConfig(M=s["M"], basis=RegressionBasis(s["basis"], s["degree"], s["bins"]),
                        implicit_iterations=s["implicit_iterations"],
                        svd_tolerance=s["svd_tolerance"], y_bound=s["y_bound"],
                        control_variate=s["control_variate"])


def _env_seeds(cfg) -> list[int]:
    from .bench import derive_seed

    return [derive_seed(cfg["seed"], 100, e) for e in range(cfg["environments"])]


def cmd_check(run: Run) -> int:
    cfg = run.cfg
    with run.stage("assumptions"):
        model = _model(cfg)
        rep = model.report()
        _write(run.path("assumptions.csv"), ["condition", "expression", "value", "passed"],
               [(n, e, v, int(p)) for n, e, v, p in rep.rows()])
    with run.stage("probes"):
        box = Box(**{k: tuple(v) for k, v in cfg["check"]["box"].items()})
        run.seeds["probes"] = cfg["seed"]
        viol = probe_monotonicity(model.coefficients.f, model.constants.mu, box,
                                  cfg["check"]["probe_samples"], cfg["seed"], d=model.d)
        status = "unfalsified" if not viol else "falsified"
        _write(run.path("probes.csv"), ["probe", "samples", "violations", "status"],
               [("monotonicity", cfg["check"]["probe_samples"], len(viol), status)])
    if rep.margin_warning:
        print(f"warning: {rep.margin_warning}", file=sys.stderr)
    return EXIT_OK if rep.structural and not viol else EXIT_FAILED


def cmd_forward(run: Run) -> int:
    cfg, fw = run.cfg, run.cfg["forward"]
    model = _model(cfg)
    M, h = cfg["solver"]["M"], cfg["grid"]["h"]
    grid = TimeGrid.covering(0.0, fw["horizon"], h)
    x = np.asarray(fw["x"], dtype=float)
    run.seeds["W"] = {"seed": cfg["seed"], "stream": 2}
    with run.stage("simulate"):
        w = ensemble_increments(grid, M, model.d, cfg["seed"], 2)
        ens = simulate_forward(model, grid, fw["t"], x, w, M)
        export_summary(ens, run.path("forward_summary.csv"))
        if fw["export_paths"]:
            export_ensemble(ens, run.path("forward_ensemble.csv"))
    with run.stage("checks"):
        flow = check_flow_property(model, grid, fw["t"], x, fw["T_mid"], w, M)
        shift = check_shift_property(model, grid, fw["t"], x, fw["r_steps"], w, M)
        _write(run.path("forward_checks.csv"), ["check", "deviation", "threshold", "passed"],
               [("flow", flow, 0.0, int(flow == 0.0)), ("shift", shift, 0.0, int(shift == 0.0))])
    return EXIT_OK if flow == 0.0 and shift == 0.0 else EXIT_FAILED


def _terminal(spec):
    kind, value = spec["kind"], float(spec.get("value", 0.0))
    return {"zero": lambda x: np.zeros(len(x)),
            "constant": lambda x: np.full(len(x), value),
            "identity": lambda x: x[:, 0],
            "square": lambda x: np.sum(x**2, axis=1)}[kind]


def cmd_solve(run: Run) -> int:
    cfg, sv = run.cfg, run.cfg["solve"]
    bench = sv["benchmark"]
    h = cfg["grid"]["h"]
    if bench == "martingale":
        model = build_model("custom-polynomial", {"f_y": [0.0], "g_y": [0.0], "diffusion": 1.0},
                            {**cfg["constants"], "d": 1, "l": 1}, override=True)
        terminal = _terminal({"kind": "identity"})
    elif bench == "scalar-ode":
        model = build_model("custom-polynomial", {"f_y": [0.0, -1.0], "g_y": [0.0]},
                            {**cfg["constants"], "mu": 1.0, "d": 1, "l": 1},
                            override=cfg["override_assumptions"])
        terminal = _terminal({"kind": "constant", "value": 1.0})
    elif bench == "telescoping":
        model = build_model("custom-polynomial", {"f_y": [0.0], "g_y": [1.0]},
                            {**cfg["constants"], "d": 1, "l": 1}, override=True)
        terminal = _terminal({"kind": "zero"})
    else:
        model = _model(cfg)
        terminal = _terminal(sv["terminal"])
    M = cfg["solver"]["M"]
    grid = TimeGrid.covering(0.0, sv["horizon"], h)
    run.seeds["W"] = {"seed": cfg["seed"], "stream": 2}
    run.seeds["B_hat"] = {"seed": cfg["seed"], "stream": 1}
    with run.stage("solve"):
        w = ensemble_increments(grid, M, model.d, cfg["seed"], 2)
        bhat = generate_increments(grid, model.l, cfg["seed"], 1)
        ens = simulate_forward(model, grid, sv["t"], np.asarray(sv["x"], dtype=float), w, M)
        sol = solve_finite_horizon(model, ens, bhat, terminal, _solver(cfg), w)
        export_solution(sol, run.out, {"model": model.name, "seed": cfg["seed"],
                                       "h": h, "n_steps": grid.n_steps,
                                       "config": config_hash(cfg)[:16]})
        nodes = grid.nodes[ens.start_index:]
        _write(run.path("solution_nodes.csv"), ["t", "mean_Y", "mean_Z0"],
               [(t, float(sol.y_paths[k].mean()), float(sol.z_paths[k, :, 0].mean()))
                for k, t in enumerate(nodes)])
    if bench == "none":
        return EXIT_OK
    with run.stage("errors"):
        X = ens.states[ens.start_index:, :, 0]
        if bench == "martingale":
            y_err = float(np.sqrt(np.mean((sol.y_paths - X) ** 2, axis=1))[1:-1].max())
            z_err = float(np.sqrt(np.mean((sol.z_paths[1:-1, :, 0] - 1.0) ** 2)))
            rows = [("sup_interior_Y_rms", y_err, 2e-2), ("Z_rms", z_err, 5e-2)]
        elif bench == "scalar-ode":
            exact = math.exp(-(sv["horizon"] - sv["t"]))
            rows = [("abs_error_Y0", abs(sol.y0() - exact), 5e-3)]
        else:
            bpath = bhat.path()[:, 0]
            exact = -(bpath[-1] - bpath[ens.start_index:])
            dev = float(np.max(np.abs(sol.y_paths.mean(axis=1) - exact)))
            rows = [("max_abs_error_Y", dev, 1e-10)]
        _write(run.path("errors.csv"), ["quantity", "value", "threshold", "passed"],
               [(q, v, t, int(v <= t)) for q, v, t in rows])
    return EXIT_OK if all(v <= t for _, v, t in rows) else EXIT_FAILED


def _field(run: Run, model, seeds):
    cfg = run.cfg
    g = cfg["grid"]
    run.seeds["environments"] = seeds
    return stationary_field(model, g["T"], g["t_grid"], g["x_grid"], seeds, cfg["epsilon"],
                            _solver(cfg), g["h"], workers=run.workers)


def cmd_stationary(run: Run) -> int:
    model = _model(run.cfg)
    with run.stage("field"):
        fld = _field(run, model, _env_seeds(run.cfg))
        fld.export(run.path("field.csv"))
    return EXIT_OK


def cmd_doss(run: Run) -> int:
    cfg, ds = run.cfg, run.cfg["doss"]
    model = _model(cfg)
    if model.d != 1:
        raise ConfigError("doss: the residual diagnostic needs d = 1")
    g = cfg["grid"]
    seed = _env_seeds(cfg)[0]
    env = Environment(seed=seed, T=g["T"], h=g["h"], M=cfg["solver"]["M"], d=1, l=model.l)
    run.seeds["environment"] = seed
    co = model.coefficients
    ygrid = np.linspace(ds["y_grid"]["min"], ds["y_grid"]["max"], ds["y_grid"]["n"])
    with run.stage("flow"):
        B = generate_increments(TimeGrid(0.0, g["h"], env.T_steps), model.l, seed, env.b_stream)
        if ds["mollify_window"]:
            B = mollify(B, ds["mollify_window"])
        flow = solve_flow(co.noise, co.noise_dy, B, g["x_grid"], ygrid, scheme=ds["scheme"])
        export_flow(flow, run.path("flow.csv"))
    with run.stage("field"):
        fld = build_stationary_field(model, g["T"], g["t_grid"], g["x_grid"], env,
                                     cfg["epsilon"], _solver(cfg))
        fld.export(run.path("field.csv"))
    with run.stage("transform"):
        vt = transform_field(fld.values, fld.t_grid, fld.x_grid, [flow])[0]
        _write(run.path("transformed.csv"), ["t", "x", "v", "v_transformed"],
               [(float(t), float(x[0]), float(fld.values[0, i, j]), float(vt[i, j]))
                for i, t in enumerate(fld.t_grid) for j, x in enumerate(fld.x_grid)])
    if len(fld.t_grid) >= 3 and len(fld.x_grid) >= 3:
        with run.stage("residual"):
            res = pde_residual(vt, fld.t_grid, fld.x_grid[:, 0], model, flow,
                               mollified=bool(ds["mollify_window"]))
            res.export(run.path("residual.csv"))
    return EXIT_OK


def cmd_test_stationarity(run: Run) -> int:
    cfg, st = run.cfg, run.cfg["stationarity"]
    model = _model(cfg)
    g = cfg["grid"]
    M = cfg["solver"]["M"]
    solver = _solver(cfg)
    seeds = _env_seeds(cfg)
    rows, ok = [], True
    with run.stage("calibrate"):
        cal = seeds[: st["calibration_runs"]]
        r0 = st["r_steps"][0] if st["r_steps"] else 0
        scheme = calibrate_scheme_error(model, st["t"], r0, st["x"], cal, cfg["epsilon"],
                                        solver, g["h"], g["T"])
    with run.stage("shift"):
        env = Environment(seed=seeds[0], T=g["T"], h=g["h"], M=M, d=model.d, l=model.l)
        for r in st["r_steps"]:
            rep = crude_stationarity_check(model, st["t"], r, st["x"], env, cfg["epsilon"],
                                           solver, scheme_error=scheme)
            rows.append((f"shift_r{rep.r:g}", rep.deviation, rep.tolerance,
                         "pass" if rep.passed else "fail"))
            ok &= rep.passed
    if len(seeds) >= 200 and len(g["t_grid"]) >= 2:
        with run.stage("law"):
            fld = _field(run, model, seeds)
            fld.export(run.path("field.csv"))
            t0 = g["t_grid"][0]
            for t1 in g["t_grid"][1:]:
                test = law_stationarity_test(fld, t0, t1, st["x"], alpha=st["alpha"])
                rows.append((f"ks_t{t0:g}_t{t1:g}", test.pvalue, st["alpha"],
                             "pass" if test.passed else "fail"))
                ok &= test.passed
    export_reports(rows, run.path("reports.csv"))
    for name, stat, thr, verdict in rows:
        print(f"{name}: statistic={stat:.6g} threshold={thr:.6g} {verdict}")
    return EXIT_OK if ok else EXIT_FAILED


def cmd_bench(run: Run) -> int:
    from .bench import run_bench

    cfg = run.cfg
    run.seeds["master"] = cfg["seed"]
    with run.stage("bench"):
        results = run_bench(run.out, cfg["seed"], cfg["bench"]["profile"], run.workers,
                            cfg["bench"]["criteria"] or None, log=print)
    for r in results:
        run.stages[f"criterion_{r.number:02d}"] = r.seconds
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


COMMANDS = {"check": cmd_check, "forward": cmd_forward, "solve": cmd_solve,
            "stationary": cmd_stationary, "doss": cmd_doss,
            "test-stationarity": cmd_test_stationarity, "bench": cmd_bench}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bdsde", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment configuration")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help=f"output directory (default ${OUTPUT_ROOT_ENV}/<command>)")
    common.add_argument("--workers", type=int, default=1, help="parallel workers")
    common.add_argument("--override-assumptions", action="store_true",
                        help="run even if the structural assumptions fail")
    common.add_argument("--dump-config", action="store_true",
                        help="print the resolved configuration and exit")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"check": "assumption report", "forward": "forward ensemble and flow/shift checks",
             "solve": "finite-horizon solve or benchmark",
             "stationary": "stationary field over environments",
             "doss": "flow, transformed field and PDE residual",
             "test-stationarity": "shift and distribution reports",
             "bench": "acceptance suite"}
    for name, text in helps.items():
        sp = sub.add_parser(name, parents=[common], help=text)
        if name == "bench":
            sp.add_argument("--profile", choices=["full", "quick"])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("--seed must be >= 0")
            cfg["seed"] = args.seed
        if args.override_assumptions:
            cfg["override_assumptions"] = True
        if getattr(args, "profile", None):
            cfg["bench"]["profile"] = args.profile
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        if args.dump_config:
            sys.stdout.write(emit_config(cfg))
            return EXIT_OK
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
        out = Path(args.out) if args.out else root / args.command
        run = Run(args.command, cfg, out, args.workers)
        status = COMMANDS[args.command](run)
        run.manifest()
        return status
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        if isinstance(exc.cause, (AssumptionError, KeyError, ValueError)):
            return EXIT_CONFIG
        return EXIT_NUMERIC
    except (ConvergenceError, ArithmeticError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
