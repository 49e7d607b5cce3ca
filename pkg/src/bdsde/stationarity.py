"""Checks of the stationarity claims: pathwise shift identity, law invariance, touching test."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .backward import SolverConfig
from .doss import FlowGrid
from .horizon import Environment, StationaryField, solve_infinite
from .model import ModelSpec

KS_RESOLUTION = 1e-12


@dataclass(frozen=True)
class ShiftTestReport:
    t: float
    r: float
    x: tuple
    value_shifted: float
    value_direct: float
    deviation: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.deviation <= self.tolerance


def crude_stationarity_check(model: ModelSpec, t: float, r_steps: int, x, env: Environment,
                             epsilon: float, config: SolverConfig, scheme_error: float = 0.0,
                             direct_env: Environment | None = None) -> ShiftTestReport:
    """Compare ``θ̂_r ∘ Y_t^{t,x}`` with ``Y_{t+r}^{t+r,x}``.

    The shifted run re-windows both ``W`` and ``B̂`` by ``r_steps`` and starts
    at ``t``; the direct run starts at ``t + r`` on the unshifted streams (or
    on ``direct_env``, for negative controls).  Tolerance is
    ``2*epsilon + scheme_error``.
    """
    if r_steps < 0:
        raise ValueError("r_steps must be >= 0")
    shifted = solve_infinite(model, t, x, env.shifted(r_steps), epsilon, config)
    direct = solve_infinite(model, t + r_steps * env.h, x, direct_env or env, epsilon, config)
    dev = abs(shifted.y0 - direct.y0)
    return ShiftTestReport(t, r_steps * env.h, tuple(np.atleast_1d(x).tolist()), shifted.y0,
                           direct.y0, dev, 2 * epsilon + scheme_error)


def calibrate_scheme_error(model: ModelSpec, t: float, r_steps: int, x, seeds: Sequence[int],
                           epsilon: float, config: SolverConfig, h: float, T: float) -> float:
    """Twice the largest shift deviation seen over ``seeds`` on a benchmark model."""
    worst = 0.0
    for seed in seeds:
        env = Environment(seed=seed, T=T, h=h, M=config.M, d=model.d, l=model.l)
        rep = crude_stationarity_check(model, t, r_steps, x, env, epsilon, config)
        worst = max(worst, rep.deviation)
    return 2.0 * worst


@dataclass(frozen=True)
class DistributionTest:
    statistic: float
    pvalue: float
    moment_diffs: tuple[float, float, float, float]
    moment_se: tuple[float, float]
    alpha: float
    n_a: int
    n_b: int

    @property
    def rejected(self) -> bool:
        return self.pvalue < self.alpha

    @property
    def moments_agree(self) -> bool:
        return all(abs(d) <= 3 * s for d, s in zip(self.moment_diffs[:2], self.moment_se))

    @property
    def passed(self) -> bool:
        return not self.rejected and self.moments_agree


def _moments(x: np.ndarray):
    mean = float(np.mean(x))
    var = float(np.var(x, ddof=1)) if len(x) > 1 else 0.0
    sd = math.sqrt(var)
    skew = float(stats.skew(x)) if sd > 0 else 0.0
    kurt = float(stats.kurtosis(x)) if sd > 0 else 0.0
    m4 = float(np.mean((x - mean) ** 4))
    return mean, var, skew, kurt, m4


def two_sample_test(a, b, alpha: float = 0.01) -> DistributionTest:
    """Two-sample KS test plus first-four-moment differences.

    Samples are compared at a resolution of ``1e-12`` so that point masses
    carrying rounding noise count as ties.
    """
    a = np.round(np.asarray(a, dtype=float) / KS_RESOLUTION) * KS_RESOLUTION
    b = np.round(np.asarray(b, dtype=float) / KS_RESOLUTION) * KS_RESOLUTION
    res = stats.ks_2samp(a, b)
    ma, mb = _moments(a), _moments(b)
    diffs = tuple(ma[k] - mb[k] for k in range(4))
    se_mean = math.sqrt(ma[1] / len(a) + mb[1] / len(b))
    se_var = math.sqrt(max(ma[4] - ma[1] ** 2, 0.0) / len(a)
                       + max(mb[4] - mb[1] ** 2, 0.0) / len(b))
    return DistributionTest(float(res.statistic), float(res.pvalue), diffs, (se_mean, se_var),
                            alpha, len(a), len(b))


def law_stationarity_test(field: StationaryField, t: float, t_plus_r: float, x,
                          alpha: float = 0.01, min_environments: int = 200) -> DistributionTest:
    """Equality in law of ``v(t, x)`` and ``v(t + r, x)`` across environments."""
    if field.E < min_environments:
        raise ValueError(f"{field.E} environments; at least {min_environments} are required")
    return two_sample_test(field.slice_at(t, x), field.slice_at(t_plus_r, x), alpha)


@dataclass(frozen=True)
class TouchReport:
    tau: float
    xi: float
    max_gap: float
    lhs: float
    rhs: float
    touching: bool
    interior: bool
    kind: str
    tol: float

    @property
    def difference(self) -> float:
        return self.lhs - self.rhs

    @property
    def verdict(self) -> str:
        if not self.touching:
            return "no-touch"
        if not self.interior:
            return "inconclusive"
        ok = self.lhs >= self.rhs - self.tol if self.kind == "sub" else self.lhs <= self.rhs + self.tol
        return "holds" if ok else "violated"


@dataclass(frozen=True)
class TestFunction:
    """Smooth deterministic test field with its derivatives (``d = 1``)."""

    phi: Callable
    phi_t: Callable
    phi_x: Callable
    phi_xx: Callable


def viscosity_touch_check(v: np.ndarray, t_grid, x_grid, test: TestFunction, model: ModelSpec,
                          flow: FlowGrid | None = None, kind: str = "sub",
                          touch_tol: float = 1e-8, tol: float = 1e-6) -> TouchReport:
    """Spot check of the sub/supersolution inequality at the grid extremum of ``v - ψ``.

    ``ψ = λ(t, x, φ(t, x))`` (``ψ = φ`` without a flow).  Touching requires
    the extremum of ``v - ψ`` to be zero within ``touch_tol``; among tied
    extremisers the one nearest the grid centre is used.
    """
    if kind not in ("sub", "super"):
        raise ValueError("kind must be 'sub' or 'super'")
    if model.d != 1:
        raise ValueError("the touching check is implemented for d = 1")
    t = np.asarray(t_grid, dtype=float)
    x = np.asarray(x_grid, dtype=float).reshape(-1)
    T_, X_ = np.meshgrid(t, x, indexing="ij")
    phi = test.phi(T_, X_)
    if flow is None:
        psi = phi
    else:
        psi = np.empty_like(phi)
        for i, ti in enumerate(t):
            k = flow.t_index(float(ti))
            for j, xj in enumerate(x):
                psi[i, j] = flow.interpolate(k, flow.x_index(xj), phi[i, j])
    gap = np.asarray(v, dtype=float) - psi
    if kind == "super":
        gap = -gap
    best = gap.max()
    cand = np.argwhere(gap >= best - touch_tol)
    centre = (np.array(gap.shape) - 1) / 2.0
    inner = [c for c in cand if 0 < c[0] < gap.shape[0] - 1 and 0 < c[1] < gap.shape[1] - 1]
    pool = inner or list(cand)
    i, j = min(pool, key=lambda c: (float(np.sum((c - centre) ** 2)), tuple(c)))
    tau, xi = float(t[i]), float(x[j])
    interior = bool(inner)
    co = model.coefficients
    p = float(test.phi(tau, xi))
    p_t, p_x, p_xx = float(test.phi_t(tau, xi)), float(test.phi_x(tau, xi)), float(test.phi_xx(tau, xi))
    if flow is None:
        lam, ly, lyy, lx, lxy, lxx = p, 1.0, 0.0, 0.0, 0.0, 0.0
    else:
        der = flow.derivatives(flow.t_index(tau), np.array([xi]), p)
        lam, ly, lyy = der["lam"], der["dy"], der["dyy"]
        lx, lxy, lxx = der["dx"][0], der["dxy"][0], der["dxx"][0, 0]
    dpsi = lx + ly * p_x
    d2psi = lxx + 2 * lxy * p_x + lyy * p_x**2 + ly * p_xx
    xv = np.array([[xi]])
    s = float(co.diffusion(xv)[0, 0, 0])
    b = float(co.drift(xv)[0, 0])
    gen = 0.5 * s**2 * d2psi + b * dpsi
    lhs = gen + float(co.driver(xv, np.array([lam]), np.array([[s * dpsi]]))[0])
    rhs = ly * p_t
    return TouchReport(tau, xi, float(best if kind == "sub" else -best), float(lhs), float(rhs),
                       bool(abs(best) <= touch_tol), interior, kind, tol)


def export_reports(rows: Sequence[tuple], path: str | Path) -> None:
    """Write ``(test, statistic, threshold, verdict)`` rows."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["test", "statistic", "threshold", "verdict"])
        for name, stat, thr, verdict in rows:
            wr.writerow([name, repr(float(stat)), repr(float(thr)), verdict])
