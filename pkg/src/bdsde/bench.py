"""Acceptance benchmarks shared by the ``bench`` subcommand and the test suite.

Every criterion returns a :class:`CriterionResult` whose rows are written to
one CSV per criterion.  Timings never enter the CSVs, so two runs with the
same seed produce byte-identical files.
"""
from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .backward import RegressionBasis, SolverConfig, contraction_check, solve_finite_horizon
from .catalog import build_model
from .doss import invert_flow, solve_flow, transformed_driver
from .forward import (check_flow_property, check_shift_property, ensemble_increments,
                      holder_estimate, simulate_forward)
from .horizon import (Environment, build_stationary_field, pooled_distance, solve_infinite,
                      solve_truncated, stationary_field)
from .model import AssumptionConstants, check_assumptions
from .noise import TimeGrid, coarsen, generate_increments, reverse_path, shift_increments
from .stationarity import (calibrate_scheme_error, crude_stationarity_check,
                           law_stationarity_test)

PROFILES = {
    "full": dict(martingale_M=10_000, contraction_M=100, fixed_point_E=200, fixed_point_M=10,
                 ou_E=500, decay_E=50, flow_paths=40, holder_M=2000, calibration_runs=20),
    "quick": dict(martingale_M=1000, contraction_M=20, fixed_point_E=200, fixed_point_M=10,
                  ou_E=200, decay_E=8, flow_paths=8, holder_M=200, calibration_runs=3),
}


@dataclass
class CriterionResult:
    number: int
    name: str
    rows: list[tuple[str, float, float, bool]] = field(default_factory=list)
    extra_ok: bool = True
    seconds: float = 0.0

    def add(self, quantity: str, value: float, threshold: float, passed: bool) -> bool:
        self.rows.append((quantity, float(value), float(threshold), bool(passed)))
        return bool(passed)

    @property
    def passed(self) -> bool:
        return self.extra_ok and all(r[3] for r in self.rows)

    def line(self) -> str:
        worst = next((r for r in self.rows if not r[3]), self.rows[-1] if self.rows else None)
        tail = f" ({worst[0]}={worst[1]:.4g} vs {worst[2]:.4g})" if worst else ""
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.number:2d} {self.name}{tail}"

    def write(self, directory: Path) -> Path:
        path = directory / f"criterion_{self.number:02d}_{self.name}.csv"
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["quantity", "value", "threshold", "passed"])
            for q, v, t, ok in self.rows:
                wr.writerow([q, repr(v), repr(t), int(ok)])
        return path


def derive_seed(seed: int, *key: int) -> int:
    """A 63-bit seed for a labelled sub-stream of the master seed."""
    state = np.random.SeedSequence(seed, spawn_key=key).generate_state(1, dtype=np.uint64)[0]
    return int(state >> np.uint64(1))


# -- shared benchmark models -------------------------------------------------

def martingale_model():
    return build_model("custom-polynomial", {"f_y": [0.0], "g_y": [0.0], "diffusion": 1.0},
                       dict(mu=0.0, K=1.0, Kprime=1.5, p=4.0), override=True)


def decay_model(mu=1.0, K=1.0, Kprime=1.5):
    return build_model("custom-polynomial", {"f_y": [0.0, -mu], "g_y": [0.0], "diffusion": 1.0},
                       dict(mu=mu, K=K, Kprime=Kprime, p=4.0))


def fixed_point_model(a=2.0, mu=1.0):
    return build_model("linear", {"a": a, "mu": mu, "kappa": 1.0, "diffusion": 0.5},
                       dict(mu=mu, K=0.5, Kprime=0.95, p=4.0))


def ou_noise_model(g0=1.0, mu=1.0, K=0.5, Kprime=0.95):
    return build_model("ou", {"g0": g0, "mu": mu, "kappa": 1.0, "diffusion": 0.1},
                       dict(mu=mu, K=K, Kprime=Kprime, p=4.0))


# -- criteria ----------------------------------------------------------------

def assumption_gate(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(1, "assumption_gate")
    start = time.perf_counter()
    base = dict(d=2, p=5.0, K=1.0, Kprime=1.5, mu=3.0, C=0.1, L=0.05, alpha=0.0)
    ok = check_assumptions(AssumptionConstants(**base))
    bad = check_assumptions(AssumptionConstants(**{**base, "mu": 1.0}))
    zero = check_assumptions(AssumptionConstants(**{**base, "C": 0.0, "L": 0.0}))
    elapsed = time.perf_counter() - start
    res.add("pass_all", ok.all_passed, 1, ok.all_passed)
    res.add("A3_margin", ok["A3-margin"].value, 0.75, abs(ok["A3-margin"].value - 0.75) < 1e-12)
    res.add("A4_margin", ok["A4-margin"].value, 0.725, abs(ok["A4-margin"].value - 0.725) < 1e-12)
    v = bad["A3-margin"].value
    res.add("A3_margin_mu1", v, -3.25, abs(v + 3.25) < 1e-12 and not bad["A3-margin"].passed)
    res.add("zero_A3", zero["A3-margin"].value, 2 * 3.0 - 2.5 * 1.5,
            zero["A3-margin"].value == 2 * 3.0 - 2.5 * 1.5)
    res.add("zero_H2", zero["H2-margin"].value, 6.0 - 1.5, zero["H2-margin"].value == 4.5)
    res.add("zero_A4", zero["A4-margin"].value, 1.0, zero["A4-margin"].value == 1.0)
    res.extra_ok = elapsed < 1e-3
    return res


def martingale(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(2, "martingale")
    M = prof["martingale_M"]
    model = martingale_model()
    grid = TimeGrid(0.0, 1e-2, 100)
    start = time.perf_counter()
    w = ensemble_increments(grid, M, 1, derive_seed(seed, 2), 1)
    bhat = generate_increments(grid, 1, derive_seed(seed, 2), 2)
    fw = simulate_forward(model, grid, 0.0, np.array([0.3]), w, M)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: x[:, 0],
                               SolverConfig(M=M, basis=RegressionBasis(degree=1)), w)
    elapsed = time.perf_counter() - start
    X = fw.states[:, :, 0]
    y_rms = np.sqrt(np.mean((sol.y_paths - X) ** 2, axis=1))[1:-1]
    z_rms = float(np.sqrt(np.mean((sol.z_paths[1:-1, :, 0] - 1.0) ** 2)))
    res.add("sup_interior_Y_rms", y_rms.max(), 2e-2, y_rms.max() <= 2e-2)
    res.add("Z_rms", z_rms, 5e-2, z_rms <= 5e-2)
    res.extra_ok = elapsed <= 30.0
    return res


def scalar_ode(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(3, "scalar_ode")
    model = decay_model()
    grid = TimeGrid(0.0, 1e-3, 1000)
    M = prof["contraction_M"]
    w = ensemble_increments(grid, M, 1, derive_seed(seed, 3), 1)
    bhat = generate_increments(grid, 1, derive_seed(seed, 3), 2)
    fw = simulate_forward(model, grid, 0.0, np.array([0.0]), w, M)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: np.ones(len(x)),
                               SolverConfig(M=M, basis=RegressionBasis(degree=1)), w)
    err = abs(sol.y0() - math.exp(-1.0))
    res.add("abs_error_Y0", err, 5e-3, err <= 5e-3)
    return res


def fixed_point(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(4, "fixed_point")
    model = fixed_point_model()
    M, h, T, eps = prof["fixed_point_M"], 0.05, 2.0, 1e-3
    cfg = SolverConfig(M=M, basis=RegressionBasis(degree=0))
    env = Environment(seed=derive_seed(seed, 4), T=T, h=h, M=M)
    inf = solve_infinite(model, 0.0, [0.5], env, eps, cfg)
    res.add("abs_error_Y0", abs(inf.y0 - 2.0), 5e-3, abs(inf.y0 - 2.0) <= 5e-3)
    worst = 0.0
    for e in range(3):
        env_e = Environment(seed=derive_seed(seed, 4, 1, e), T=T, h=h, M=M)
        fld = build_stationary_field(model, T, [0.0, 1.0, 2.0], [-1.0, 0.0, 1.0], env_e, eps, cfg)
        worst = max(worst, float(np.max(np.abs(fld.values - 2.0))))
    res.add("field_max_abs_error", worst, 5e-3, worst <= 5e-3)
    seeds = [derive_seed(seed, 4, 2, k) for k in range(prof["calibration_runs"])]
    scheme = calibrate_scheme_error(model, 0.0, 25, [0.5], seeds, eps, cfg, h, T)
    rep = crude_stationarity_check(model, 0.0, 25, [0.5], env, eps, cfg, scheme_error=scheme)
    res.add("shift_deviation", rep.deviation, rep.tolerance, rep.passed)
    law_seeds = [derive_seed(seed, 4, 3, k) for k in range(prof["fixed_point_E"])]
    fld = stationary_field(model, T, [0.0, 1.0], [0.0], law_seeds, eps, cfg, h)
    test = law_stationarity_test(fld, 0.0, 1.0, 0.0)
    res.add("ks_statistic", test.statistic, 1e-12, test.statistic <= 1e-12)
    return res


def ou_stationary_law(seed: int, prof: dict, workers: int = 1) -> CriterionResult:
    res = CriterionResult(5, "ou_stationary_law")
    model = ou_noise_model()
    M, h, T = 10, 1e-2, 10.0
    cfg = SolverConfig(M=M, basis=RegressionBasis(degree=0))
    seeds = [derive_seed(seed, 5, e) for e in range(prof["ou_E"])]
    fld = stationary_field(model, T, [0.0, 1.0], [0.0], seeds, 1e-3, cfg, h, workers=workers)
    for t in (0.0, 1.0):
        var = float(np.var(fld.slice_at(t, 0.0), ddof=1))
        res.add(f"variance_t{t:g}", var, 0.5, abs(var - 0.5) <= 0.05)
    test = law_stationarity_test(fld, 0.0, 1.0, 0.0, min_environments=min(200, fld.E))
    res.add("ks_pvalue", test.pvalue, 0.01, test.pvalue >= 0.01)
    res.add("ks_statistic", test.statistic, 1.0, True)
    return res


def contraction(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(6, "contraction")
    model = decay_model()
    grid = TimeGrid(0.0, 1e-3, 1000)
    M = prof["contraction_M"]
    w = ensemble_increments(grid, M, 1, derive_seed(seed, 6), 1)
    bhat = generate_increments(grid, 1, derive_seed(seed, 6), 2)
    fw = simulate_forward(model, grid, 0.0, np.array([0.0]), w, M)
    chk = contraction_check(model, fw, w, bhat, lambda x: np.ones(len(x)),
                            lambda x: np.zeros(len(x)), model.constants.K,
                            SolverConfig(M=M, basis=RegressionBasis(degree=1)))
    margin = chk.lhs / (chk.rhs * (1.0 + chk.slack))
    res.add("max_lhs_over_bound", margin.max(), 1.0, chk.holds)
    return res


def truncation_decay(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(7, "truncation_decay")
    K, Kp = 0.5, 0.8
    model = ou_noise_model(K=K, Kprime=Kp)
    M, h = 10, 1e-2
    cfg = SolverConfig(M=M, basis=RegressionBasis(degree=0))
    ns = [5, 10, 20, 40]
    envs = [Environment(seed=derive_seed(seed, 7, e), T=10.0, h=h, M=M)
            for e in range(prof["decay_E"])]
    logs = []
    for n in ns:
        pairs = [(solve_truncated(model, n, 0.0, [0.0], env, cfg),
                  solve_truncated(model, 2 * n, 0.0, [0.0], env, cfg)) for env in envs]
        dist = pooled_distance(pairs, K, model.constants.p)
        res.add(f"log_distance_n{n}", math.log(dist.norm), 0.0, True)
        logs.append(math.log(dist.norm))
    slope = float(np.polyfit(ns, logs, 1)[0])
    target = -(Kp - K) / 2
    res.add("slope_over_target", slope / target, 2.0, 0.5 <= slope / target <= 2.0)
    return res


def shift_algebra(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(8, "shift_algebra")
    grid = TimeGrid(0.0, 1e-2, 200)
    s = derive_seed(seed, 8)
    b = generate_increments(grid, 2, s, 1)
    back = reverse_path(reverse_path(b, grid.t1), grid.t1)
    res.add("involution", float(np.max(np.abs(back.data - b.data))), 0.0,
            np.array_equal(back.data, b.data))
    ab = shift_increments(shift_increments(b, 30), 45)
    direct = shift_increments(b, 75)
    res.add("semigroup", float(np.max(np.abs(ab.data - direct.data))), 0.0,
            np.array_equal(ab.data, direct.data))
    model = ou_noise_model()
    w = ensemble_increments(grid, 100, 1, s, 2)
    flow = check_flow_property(model, grid, 0.2, np.array([0.4]), 1.0, w, 100)
    shift = check_shift_property(model, grid, 0.2, np.array([0.4]), 30, w, 100)
    res.add("forward_flow", flow, 0.0, flow == 0.0)
    res.add("forward_shift", shift, 0.0, shift == 0.0)
    return res


def _closed_form_errors(seed, c, y, paths, h_fine, factor):
    g = lambda x, yy: c * np.asarray(yy)[..., None]
    dg = lambda x, yy: np.full(np.shape(yy) + (1,), c)
    out = []
    for k in range(paths):
        fine = generate_increments(TimeGrid(0.0, h_fine, round(1.0 / h_fine)), 1,
                                   derive_seed(seed, 9, k), 1)
        B = coarsen(fine, factor)
        fl = solve_flow(g, dg, B, [[0.0]], y)
        exact = y[None, :] * np.exp(-c * B.path()[:, 0])[:, None]
        out.append(float(np.max(np.abs(fl.lam[:, 0, :] - exact) / np.abs(exact))))
    return np.array(out)


def doss_sussmann(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(9, "doss_sussmann")
    c = 0.5
    y = np.array([-2.0, -1.0, -0.5, 0.5, 1.0, 2.0])
    e1 = _closed_form_errors(seed, c, y, prof["flow_paths"], 5e-4, 2)
    e2 = _closed_form_errors(seed, c, y, prof["flow_paths"], 5e-4, 1)
    res.add("closed_form_rel_error_h1e-3", e1.max(), 1e-2, e1.max() <= 1e-2)
    ratio = float(np.sqrt(np.mean(e1**2) / np.mean(e2**2)))
    res.add("halving_ratio", ratio, 2.0, 1.4 <= ratio <= 2.6)

    g = lambda x, yy: c * np.asarray(yy)[..., None]
    dg = lambda x, yy: np.full(np.shape(yy) + (1,), c)
    B = generate_increments(TimeGrid(0.0, 1e-3, 1000), 1, derive_seed(seed, 9, 999), 1)
    ygrid = np.linspace(-5.0, 5.0, 201)
    fl = solve_flow(g, dg, B, [[0.0]], ygrid)
    worst = 0.0
    for ti in (0, 250, 500, 1000):
        lam = fl.lam[ti, 0]
        targets = np.linspace(lam[0], lam[-1], 57)[1:-1]
        back = fl.interpolate(ti, 0, invert_flow(fl, ti, 0, targets))
        worst = max(worst, float(np.max(np.abs(back - targets))))
    res.add("roundtrip", worst, 1e-6, worst <= 1e-6)

    linear = build_model("custom-polynomial", {"f_y": [0.0, -1.0], "g_y": [0.0, c],
                                               "kappa": 1.0, "diffusion": 0.5},
                         dict(mu=1.0, K=1.0, Kprime=1.5, p=4.0))
    fdev = 0.0
    for ti in (250, 1000):
        for yy in (-1.0, 0.3, 1.5):
            ft = transformed_driver(fl, linear, ti, [0.0], yy, [0.2])
            fdev = max(fdev, abs(ft + yy))
    res.add("linear_g_driver", fdev, 1e-3, fdev <= 1e-3)

    flat = build_model("linear", {"a": 2.0, "mu": 1.0, "kappa": 1.0, "diffusion": 0.5},
                       dict(mu=1.0, K=1.0, Kprime=1.5, p=4.0))
    zero = lambda x, yy: np.zeros(np.shape(yy) + (1,))
    fl0 = solve_flow(zero, zero, B, [[0.0]], ygrid)
    gap = 0.0
    for yy in (-1.0, 0.3, 1.5):
        ft = transformed_driver(fl0, flat, 500, [0.0], yy, [0.2])
        gap = max(gap, abs(ft - (2.0 - yy)))
    res.add("zero_g_driver", gap, 0.0, gap == 0.0)
    return res


def holder(seed: int, prof: dict) -> CriterionResult:
    res = CriterionResult(10, "holder")
    model = build_model("ou", {"g0": 0.0, "mu": 1.0, "kappa": 1.0, "diffusion": 1.0},
                        dict(mu=1.0, K=1.0, Kprime=1.5, p=4.0))
    x = 0.5
    pairs = [((0.0, x), (0.0, x + d)) for d in (0.1, 0.05, 0.025)]
    pairs += [((0.0, x), (dt, x)) for dt in (0.1, 0.05)]
    est = holder_estimate(model, pairs, p=4.0, K=1.0, M=prof["holder_M"], h=1e-3,
                          seed=derive_seed(seed, 10))
    ratios = np.array([e.ratio for e in est])
    for (a, b), r in zip(pairs, ratios):
        res.add(f"ratio_dt{b[0] - a[0]:g}_dx{b[1] - a[1]:.3g}", r, 0.0, np.isfinite(r))
    spread = float(ratios.max() / ratios.min())
    res.add("max_over_min", spread, 4.0, spread <= 4.0)
    return res


CRITERIA: dict[int, Callable[..., CriterionResult]] = {
    1: assumption_gate, 2: martingale, 3: scalar_ode, 4: fixed_point, 5: ou_stationary_law,
    6: contraction, 7: truncation_decay, 8: shift_algebra, 9: doss_sussmann, 10: holder,
}


def run_criterion(number: int, seed: int = 0, profile: str = "full",
                  workers: int = 1) -> CriterionResult:
    prof = PROFILES[profile]
    fn = CRITERIA[number]
    start = time.perf_counter()
    res = fn(seed, prof, workers=workers) if number == 5 else fn(seed, prof)
    res.seconds = time.perf_counter() - start
    return res


def run_bench(out: str | Path, seed: int = 0, profile: str = "full", workers: int = 1,
              numbers=None, log: Callable[[str], None] | None = None) -> list[CriterionResult]:
    """Run the selected criteria (all by default) and write their CSVs into ``out``.

    The CSVs hold only seed-determined quantities; wall-clock gates enter
    :attr:`CriterionResult.passed` and the log line but not the files.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for k in numbers or sorted(CRITERIA):
        r = run_criterion(k, seed, profile, workers)
        r.write(out)
        results.append(r)
        if log:
            log(r.line())
    with open(out / "bench_summary.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["criterion", "name", "passed"])
        for r in results:
            wr.writerow([r.number, r.name, int(all(row[3] for row in r.rows))])
    return results


def compare_outputs(a: str | Path, b: str | Path) -> list[str]:
    """Names of CSV files that differ (or exist on one side only) between two directories."""
    fa = {p.name: p.read_bytes() for p in Path(a).glob("*.csv")}
    fb = {p.name: p.read_bytes() for p in Path(b).glob("*.csv")}
    return sorted(n for n in fa.keys() | fb.keys() if fa.get(n) != fb.get(n))
