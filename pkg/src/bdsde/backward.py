"""Least-squares Monte Carlo solver for finite-horizon BDSDEs.

For one fixed environmental path ``B̂`` the solver runs the explicit scheme

    Z_i = E_i[(Y_{i+1} - E_i[Y_{i+1}]) ΔW_i] / h
    Y_i = E_i[Y_{i+1} + h f(X_{i+1}, Y_{i+1}, Z_{i+1}) - <g(X_{i+1}, Y_{i+1}), ΔB̂_i>]

backwards from ``Y_n = terminal(X_n)``.  ``E_i`` is a least-squares
projection onto a basis in ``X_i``; ``ΔB̂_i`` is known at node ``i`` so it
passes through the projection unchanged.  With ``control_variate`` set the
zero-mean term ``Z_i ΔW_i`` is subtracted from the ``Y`` response before
projecting, which leaves the conditional mean unchanged and removes most of
the regression noise.
"""
from __future__ import annotations

import csv
import hashlib
import itertools
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .forward import ForwardEnsemble
from .model import ModelSpec
from .noise import IncrementArray


class RegressionError(ArithmeticError):
    """Raised for singular designs and non-finite regressed values."""


@dataclass(frozen=True)
class RegressionBasis:
    """Polynomial (total degree) or piecewise-constant basis in normalised state.

    States are mapped to ``u = (x - center) / halfwidth`` where the centre
    and half-width come from the 1st/99th ensemble percentiles per node.
    Bins split ``u ∈ [-1, 1]`` evenly per dimension (values outside go to
    the end bins).
    """

    kind: str = "polynomial"
    degree: int = 2
    bins: int = 8

    def __post_init__(self):
        if self.kind not in ("polynomial", "bins"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.degree < 0 or self.bins < 1:
            raise ValueError("degree must be >= 0 and bins >= 1")

    def exponents(self, d: int) -> list[tuple[int, ...]]:
        return [e for e in itertools.product(range(self.degree + 1), repeat=d)
                if sum(e) <= self.degree]

    def size(self, d: int) -> int:
        if self.kind == "bins":
            return self.bins**d
        return len(self.exponents(d))

    def features(self, u: np.ndarray) -> np.ndarray:
        """Design matrix ``(n, size)`` for normalised states ``u`` of shape ``(n, d)``."""
        n, d = u.shape
        if self.kind == "bins":
            idx = np.clip(((u + 1.0) * 0.5 * self.bins).astype(int), 0, self.bins - 1)
            flat = np.ravel_multi_index(idx.T, (self.bins,) * d)
            out = np.zeros((n, self.bins**d))
            out[np.arange(n), flat] = 1.0
            return out
        if d == 1:
            return u[:, :1] ** np.arange(self.degree + 1)
        cols = [np.prod(u ** np.array(e), axis=1) for e in self.exponents(d)]
        return np.stack(cols, axis=1)


def normalisation(states: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = np.percentile(states, [1.0, 99.0], axis=0)
    center = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    half = np.where(half > 1e-12 * (1.0 + np.abs(center)), half, 1.0)
    return center, half


@dataclass(frozen=True)
class RegressionFit:
    coef: np.ndarray
    residual_var: np.ndarray
    center: np.ndarray
    halfwidth: np.ndarray
    singular_values: np.ndarray

    @property
    def condition(self) -> float:
        s = self.singular_values[self.singular_values > 0]
        return float(s[0] / s[-1])


def _pinv(design: np.ndarray, svd_tolerance: float):
    u, s, vt = np.linalg.svd(design, full_matrices=False)
    if not (s.size and np.isfinite(s[0]) and s[0] > 0):
        raise RegressionError("regression design is identically zero")
    keep = s > svd_tolerance * s[0]
    s_kept = np.where(keep, s, 0.0)
    inv = np.zeros_like(s)
    inv[keep] = 1.0 / s[keep]
    return (vt.T * inv) @ u.T, s_kept


def regress_conditional(responses, states, basis: RegressionBasis,
                        svd_tolerance: float = 1e-10) -> RegressionFit:
    """Least squares of ``responses`` on ``basis(states)`` via a truncated SVD.

    Singular values below ``svd_tolerance`` times the largest are dropped,
    so rank-deficient designs give the minimum-norm solution.
    """
    y = np.asarray(responses, dtype=float)
    x = np.asarray(states, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    squeeze = y.ndim == 1
    y2 = y[:, None] if squeeze else y
    if x.shape[0] < basis.size(x.shape[1]):
        raise RegressionError(f"{x.shape[0]} samples for {basis.size(x.shape[1])} basis functions")
    center, half = normalisation(x)
    design = basis.features((x - center) / half)
    pinv, s = _pinv(design, svd_tolerance)
    coef = pinv @ y2
    resid = y2 - design @ coef
    rv = resid.var(axis=0)
    return RegressionFit(coef[:, 0] if squeeze else coef, rv[0] if squeeze else rv,
                         center, half, s)


@dataclass(frozen=True)
class SolverConfig:
    M: int = 10_000
    basis: RegressionBasis = RegressionBasis()
    implicit_iterations: int = 0
    svd_tolerance: float = 1e-10
    y_bound: float = 1e6
    keep_paths: bool = True
    control_variate: bool = True

    def check_design(self, d: int) -> None:
        nb = self.basis.size(d)
        if self.M < 10 * nb:
            warnings.warn(f"M={self.M} is below 10 x {nb} basis functions", stacklevel=3)

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class BackwardSolution:
    """Per-node regression functions for ``(Y, Z)`` on ``[t, T]`` for one ``B̂``.

    Node ``i`` (``start_index <= i <= n``) is stored at row ``i - start_index``.
    The terminal row holds no coefficients: the terminal function is kept and
    evaluated directly.
    """

    model: ModelSpec
    forward: ForwardEnsemble
    bhat: IncrementArray
    terminal: Callable
    coef_y: np.ndarray
    coef_z: np.ndarray
    center: np.ndarray
    halfwidth: np.ndarray
    lo: np.ndarray
    hi: np.ndarray
    basis: RegressionBasis
    residual_var: np.ndarray
    condition: np.ndarray
    truncations: int = 0
    y_paths: np.ndarray | None = field(default=None, repr=False)
    z_paths: np.ndarray | None = field(default=None, repr=False)

    @property
    def grid(self):
        return self.forward.grid

    @property
    def start_index(self) -> int:
        return self.forward.start_index

    @property
    def n(self) -> int:
        return self.grid.n_steps

    @property
    def horizon(self) -> float:
        return self.grid.t1

    def y0(self) -> float:
        """``Y_t^{t,x}`` at the start node (all paths share the frozen state)."""
        y, _ = evaluate_solution(self, self.start_index, self.forward.states[self.start_index, 0])
        return float(y[0])


def _terminal_z(model: ModelSpec, terminal: Callable, x: np.ndarray) -> np.ndarray:
    """``σ^*(x) ∇terminal(x)`` by central differences."""
    M, d = x.shape
    grad = np.empty((M, d))
    for k in range(d):
        step = 1e-5 * (1.0 + np.abs(x[:, k]))
        e = np.zeros(d)
        e[k] = 1.0
        up = np.asarray(terminal(x + step[:, None] * e), dtype=float)
        dn = np.asarray(terminal(x - step[:, None] * e), dtype=float)
        grad[:, k] = (up - dn) / (2 * step)
    sig = model.coefficients.diffusion(x)
    return np.einsum("mji,mj->mi", sig, grad)


def solve_finite_horizon(model: ModelSpec, forward: ForwardEnsemble, bhat: IncrementArray,
                         terminal: Callable, config: SolverConfig,
                         w: IncrementArray | None = None) -> BackwardSolution:
    """Solve the BDSDE on ``[t, T]`` (the forward ensemble's grid) for one ``B̂`` path.

    ``w`` must be the increments that produced ``forward``; it supplies
    ``ΔW_i`` for the ``Z`` estimator.
    """
    model.require_gate()
    grid = forward.grid
    if bhat.grid.h != grid.h or bhat.n_steps < grid.n_steps or bhat.grid.t0 != grid.t0:
        raise ValueError(f"B̂ increments on {bhat.grid} do not cover {grid}")
    if bhat.dim != model.l:
        raise ValueError(f"B̂ dimension {bhat.dim} != l = {model.l}")
    if w is None:
        raise ValueError("the W increments of the forward ensemble are required")
    M, d = forward.M, forward.d
    if w.n_steps != grid.n_steps or w.dim != M * d:
        raise ValueError("W increments do not match the forward ensemble")
    config.check_design(d)
    co = model.coefficients
    h = grid.h
    n, start = grid.n_steps, forward.start_index
    nodes = n - start + 1
    nb = config.basis.size(d)
    X = forward.states
    dW = w.data.reshape(n, M, d)
    dB = bhat.data

    coef_y = np.zeros((nodes, nb))
    coef_z = np.zeros((nodes, nb, d))
    center = np.zeros((nodes, d))
    half = np.ones((nodes, d))
    lo = np.zeros((nodes, d))
    hi = np.zeros((nodes, d))
    rvar = np.zeros(nodes)
    cond = np.ones(nodes)
    y_paths = np.zeros((nodes, M)) if config.keep_paths else None
    z_paths = np.zeros((nodes, M, d)) if config.keep_paths else None
    truncations = 0

    y_next = np.asarray(terminal(X[n]), dtype=float).reshape(M)
    z_next = _terminal_z(model, terminal, X[n])
    if not (np.all(np.isfinite(y_next)) and np.all(np.isfinite(z_next))):
        raise RegressionError(f"terminal values are not finite at node {n}")
    lo[-1], hi[-1] = X[n].min(axis=0), X[n].max(axis=0)
    if config.keep_paths:
        y_paths[-1], z_paths[-1] = y_next, z_next

    constant_basis = nb == 1 and config.basis.kind == "polynomial"
    inv_m = 1.0 / M
    bound = config.y_bound
    driver, noise = co.f, co.g
    for i in range(n - 1, start - 1, -1):
        row = i - start
        xi = X[i]
        if constant_basis:
            design = None
        else:
            c, hw = normalisation(xi)
            center[row], half[row] = c, hw
            design = config.basis.features((xi - c) / hw)
            try:
                pinv, s = _pinv(design, config.svd_tolerance)
            except RegressionError as exc:
                raise RegressionError(f"node {i}: {exc}") from None
            kept = s[s > 0]
            cond[row] = kept[0] / kept[-1]

        def project(values):
            if design is None:
                coef = values.sum(axis=0) * inv_m
                return coef[None], np.repeat(coef[None], M, axis=0)
            coef = pinv @ values
            return coef, design @ coef

        x_next = X[i + 1]
        _, y_mean = project(y_next)
        cz, z_fit = project((y_next - y_mean)[:, None] * dW[i] * (1.0 / h))
        response = y_next + h * driver(x_next, y_next, z_next) - noise(x_next, y_next) @ dB[i]
        if config.control_variate:
            # Z_i ΔW_i has zero conditional mean; removing it cuts regression noise
            response = response - np.einsum("md,md->m", z_fit, dW[i])
        cy, y_fit = project(response)
        resid = response - y_fit
        rvar[row] = resid @ resid * inv_m
        if config.implicit_iterations:
            g_term = project(noise(x_next, y_next) @ dB[i])[1]
            for _ in range(config.implicit_iterations):
                cy, y_fit = project(y_mean + h * driver(xi, y_fit, z_fit) - g_term)
        if not (np.isfinite(cy).all() and np.isfinite(cz).all()):
            raise RegressionError(f"non-finite regressed value at node {i}")
        if y_fit.max() > bound or y_fit.min() < -bound:
            truncations += int(np.count_nonzero(np.abs(y_fit) > bound))
            y_fit = np.clip(y_fit, -bound, bound)
        coef_y[row] = cy
        coef_z[row] = cz
        lo[row], hi[row] = xi.min(axis=0), xi.max(axis=0)
        y_next, z_next = y_fit, z_fit
        if y_paths is not None:
            y_paths[row], z_paths[row] = y_next, z_next

    return BackwardSolution(model, forward, bhat, terminal, coef_y, coef_z, center, half, lo, hi,
                            config.basis, rvar, cond, truncations, y_paths, z_paths)


def evaluate_solution(sol: BackwardSolution, node: int, x) -> tuple[np.ndarray, np.ndarray]:
    """``(y, z)`` at grid node ``node`` for one or more states ``x``.

    States outside the ensemble range at that node are clamped to it;
    ``evaluate_solution.last_extrapolated`` records whether that happened.
    """
    d = sol.forward.d
    x = np.atleast_2d(np.asarray(x, dtype=float).reshape(-1, d))
    if not sol.start_index <= node <= sol.n:
        raise ValueError(f"node {node} outside [{sol.start_index}, {sol.n}]")
    row = node - sol.start_index
    xc = np.clip(x, sol.lo[row], sol.hi[row])
    evaluate_solution.last_extrapolated = bool(np.any(xc != x))
    if node == sol.n:
        y = np.asarray(sol.terminal(xc), dtype=float).reshape(-1)
        return y, _terminal_z(sol.model, sol.terminal, xc)
    u = (xc - sol.center[row]) / sol.halfwidth[row]
    phi = sol.basis.features(u)
    return phi @ sol.coef_y[row], phi @ sol.coef_z[row]


evaluate_solution.last_extrapolated = False


@dataclass(frozen=True)
class ContractionCheck:
    times: np.ndarray
    lhs: np.ndarray
    lhs_se: np.ndarray
    rhs: float
    rhs_se: float
    slack: np.ndarray

    @property
    def holds(self) -> bool:
        return bool(np.all(self.lhs <= self.rhs * (1.0 + self.slack)))


def contraction_check(model: ModelSpec, forward: ForwardEnsemble, w: IncrementArray,
                      bhat: IncrementArray, h1: Callable, h2: Callable, K: float,
                      config: SolverConfig, c: float = 1.0) -> ContractionCheck:
    """Weighted-difference estimate ``E[e^{-Kt}|Y^1_t - Y^2_t|^2]`` against its terminal value.

    Both solves share ``W`` and ``B̂``.  The slack per node is
    ``c*h + 3*(SE_lhs + SE_rhs)/rhs``.
    """
    cfg = config if config.keep_paths else SolverConfig(**{**asdict(config), "keep_paths": True})
    s1 = solve_finite_horizon(model, forward, bhat, h1, cfg, w)
    s2 = solve_finite_horizon(model, forward, bhat, h2, cfg, w)
    times = forward.grid.nodes[forward.start_index:]
    diff2 = (s1.y_paths - s2.y_paths) ** 2 * np.exp(-K * times)[:, None]
    M = diff2.shape[1]
    lhs = diff2.mean(axis=1)
    se = diff2.std(axis=1, ddof=1) / np.sqrt(M) if M > 1 else np.zeros_like(lhs)
    rhs, rhs_se = float(lhs[-1]), float(se[-1])
    with np.errstate(divide="ignore", invalid="ignore"):
        slack = c * forward.grid.h + 3 * np.where(rhs > 0, (se + rhs_se) / rhs, 0.0)
    return ContractionCheck(times, lhs, se, rhs, rhs_se, slack)


def export_solution(sol: BackwardSolution, directory: str | Path, manifest: dict) -> list[Path]:
    """Per-node coefficient table and a JSON manifest."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    table = directory / "coefficients.csv"
    nb, d = sol.coef_y.shape[1], sol.forward.d
    with open(table, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["node", "t", "quantity", "basis_index", "value"])
        times = sol.grid.nodes
        for row in range(sol.coef_y.shape[0] - 1):
            i = sol.start_index + row
            for j in range(nb):
                wr.writerow([i, repr(float(times[i])), "Y", j, repr(float(sol.coef_y[row, j]))])
                for k in range(d):
                    wr.writerow([i, repr(float(times[i])), f"Z{k}", j,
                                 repr(float(sol.coef_z[row, j, k]))])
    man = directory / "solution_manifest.json"
    man.write_text(json.dumps(manifest, sort_keys=True, indent=2))
    return [table, man]
