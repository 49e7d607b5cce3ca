"""Infinite-horizon BDSDEs via truncation, and the stationary field built from them.

The truncated problems ``Y^n`` have zero terminal value at horizon ``n`` and
are compared in the weighted norm

    ( (E sup_t e^{-Kt}|ΔY_t|^p)^{2/p} + E ∫ e^{-Kt}|ΔY_t|^2 dt + E ∫ e^{-Kt}|ΔZ_t|^2 dt )^{1/2}.

Horizons are doubled from ``n0 = ceil(log(1/ε)/(K'-K))`` until consecutive
solutions are within ``ε``.  Truncation lengths are measured from the start
time, so shifting the start and the noise together replays the identical
recursion.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .backward import BackwardSolution, SolverConfig, solve_finite_horizon
from .forward import ForwardEnsemble, extend_forward, simulate_forward
from .model import ModelSpec
from .noise import IncrementArray, TimeGrid, generate_increments, reversed_environment


class ConvergenceError(RuntimeError):
    def __init__(self, message, trace):
        super().__init__(f"{message}; distance trace: {trace}")
        self.trace = trace


@dataclass(frozen=True)
class Environment:
    """One realisation of the environmental noise plus the auxiliary ``W`` ensemble.

    ``B̂`` is the reversal of the two-sided stream ``B`` at ``T``; solver step
    ``i`` reads ``-ΔB`` at stream step ``T/h - 1 - i - shift``.  ``W`` is read
    at stream step ``i + shift - T/h``, i.e. aligned with ``B`` in absolute
    time, so moving ``T`` and the start together leaves the inputs of the
    recursion unchanged.
    """

    seed: int
    T: float
    h: float
    M: int
    d: int = 1
    l: int = 1
    b_stream: int = 1
    w_stream: int = 2
    w_seed: int | None = None
    shift: int = 0

    @property
    def T_steps(self) -> int:
        n = round(self.T / self.h)
        if not math.isclose(n * self.h, self.T, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"T={self.T} is not a multiple of h={self.h}")
        return int(n)

    def bhat(self, n_steps: int) -> IncrementArray:
        return reversed_environment(self.seed, self.b_stream, self.T_steps - self.shift,
                                    n_steps, self.h, self.l)

    def w(self, n_steps: int) -> IncrementArray:
        seed = self.seed if self.w_seed is None else self.w_seed
        return generate_increments(TimeGrid(0.0, self.h, n_steps), self.M * self.d, seed,
                                   self.w_stream, first_index=self.shift - self.T_steps)

    def shifted(self, r_steps: int) -> "Environment":
        """The environment seen through ``θ̂_r``."""
        if r_steps < 0:
            raise ValueError("only forward shifts are supported")
        return replace(self, shift=self.shift + r_steps)


def _zero(x):
    return np.zeros(len(x))


def _config_with_paths(config: SolverConfig) -> SolverConfig:
    return config if config.keep_paths else replace(config, keep_paths=True)


def solve_truncated(model: ModelSpec, n: float, t: float, x, env: Environment,
                    config: SolverConfig, forward: ForwardEnsemble | None = None,
                    w: IncrementArray | None = None) -> BackwardSolution:
    """``Y^n`` started at ``(t, x)``: the BDSDE on ``[t, n]`` with ``Y_n = 0``.

    Values past ``n`` are identically zero and are not stored.
    """
    grid = TimeGrid(0.0, env.h, TimeGrid.covering(0.0, n, env.h).n_steps)
    if w is None:
        w = env.w(grid.n_steps)
    if forward is None:
        forward = simulate_forward(model, grid, t, np.atleast_1d(x), w, env.M)
    return solve_finite_horizon(model, forward, env.bhat(grid.n_steps), _zero,
                                _config_with_paths(config), w)


@dataclass(frozen=True)
class CauchyDistance:
    sup_part: float
    y_part: float
    z_part: float
    p: float
    se: float = 0.0

    @property
    def norm(self) -> float:
        return math.sqrt(self.sup_part ** (2.0 / self.p) + self.y_part + self.z_part)


def _distance_terms(sol_n: BackwardSolution, sol_m: BackwardSolution, K: float, p: float):
    if sol_n.grid.h != sol_m.grid.h or sol_n.grid.t0 != sol_m.grid.t0:
        raise ValueError("solutions live on different grids")
    if sol_n.start_index != sol_m.start_index:
        raise ValueError("solutions have different start nodes")
    if sol_m.n < sol_n.n:
        sol_n, sol_m = sol_m, sol_n
    if sol_n.y_paths is None or sol_m.y_paths is None:
        raise ValueError("solutions were computed without keep_paths")
    n_rows = sol_n.y_paths.shape[0]
    if not np.array_equal(sol_n.forward.states, sol_m.forward.states[: sol_n.n + 1]):
        raise ValueError("solutions were computed on different forward ensembles")
    dy = sol_m.y_paths.copy()
    dz = sol_m.z_paths.copy()
    dy[:n_rows] -= sol_n.y_paths
    dz[:n_rows] -= sol_n.z_paths
    times = sol_m.grid.nodes[sol_m.start_index:]
    weight = np.exp(-K * times)
    h = sol_m.grid.h
    sup = np.max(weight[:, None] * np.abs(dy) ** p, axis=0)
    y_int = h * (weight[:-1] @ dy[:-1] ** 2)
    z_int = h * (weight[:-1] @ np.sum(dz[:-1] ** 2, axis=2))
    return sup, y_int, z_int


def _combine(sup, y_int, z_int, p) -> CauchyDistance:
    M = len(sup)
    parts = [float(np.mean(a)) for a in (sup, y_int, z_int)]
    dist = CauchyDistance(parts[0], parts[1], parts[2], p)
    if M < 2 or dist.norm == 0:
        return dist
    ses = [float(np.std(a, ddof=1) / math.sqrt(M)) for a in (sup, y_int, z_int)]
    d_sup = (2.0 / p) * parts[0] ** (2.0 / p - 1.0) * ses[0] if parts[0] > 0 else 0.0
    se = math.sqrt(d_sup**2 + ses[1] ** 2 + ses[2] ** 2) / (2 * dist.norm)
    return replace(dist, se=se)


def cauchy_distance(sol_n: BackwardSolution, sol_m: BackwardSolution, K: float,
                    p: float) -> CauchyDistance:
    """Weighted distance between two truncations sharing ``W``, ``B̂`` and the start.

    Expectations are averages over the ``W`` ensemble for the environment the
    solutions were computed in; the shorter solution is extended by zero.
    """
    return _combine(*_distance_terms(sol_n, sol_m, K, p), p)


def pooled_distance(pairs: Sequence[tuple[BackwardSolution, BackwardSolution]], K: float,
                    p: float) -> CauchyDistance:
    """Distance with expectations pooled over several environments (one pair each)."""
    terms = [_distance_terms(a, b, K, p) for a, b in pairs]
    return _combine(*(np.concatenate([t[k] for t in terms]) for k in range(3)), p)


@dataclass
class InfiniteSolution:
    solution: BackwardSolution
    n: float
    distance: CauchyDistance
    trace: list[tuple[float, float, float]] = field(default_factory=list)

    @property
    def y0(self) -> float:
        return self.solution.y0()


def initial_horizon(epsilon: float, K: float, Kprime: float) -> int:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return max(1, math.ceil(math.log(1.0 / epsilon) / (Kprime - K)))


def solve_infinite(model: ModelSpec, t: float, x, env: Environment, epsilon: float,
                   config: SolverConfig, max_n: float = 4096.0) -> InfiniteSolution:
    """Double the truncation length until consecutive truncations are ``epsilon``-close.

    Returns the longer member of the first converged pair.  Raises
    :class:`ConvergenceError` if the lengths exceed ``max_n`` or the distance
    grows by more than three standard errors between doublings.
    """
    c = model.constants
    model.require_gate()
    L = initial_horizon(epsilon, c.K, c.Kprime)
    config = _config_with_paths(config)
    x = np.atleast_1d(np.asarray(x, dtype=float))
    start_steps = TimeGrid(0.0, env.h, 1).steps_for(t) if t > 0 else 0
    l_steps = TimeGrid(0.0, env.h, 1).steps_for(float(L))

    def solve(n_steps, forward):
        w = env.w(n_steps)
        forward = extend_forward(model, forward, w) if forward is not None else \
            simulate_forward(model, w.grid, t, x, w, env.M)
        sol = solve_finite_horizon(model, forward, env.bhat(n_steps), _zero, config, w)
        return sol, forward

    trace = []
    n_steps = start_steps + l_steps
    prev, forward = solve(n_steps, None)
    last = None
    while True:
        l_steps *= 2
        if l_steps * env.h > max_n:
            raise ConvergenceError(f"no convergence within truncation length {max_n}", trace)
        n_steps = start_steps + l_steps
        cur, forward = solve(n_steps, forward)
        dist = cauchy_distance(prev, cur, c.K, c.p)
        trace.append((prev.horizon, cur.horizon, dist.norm))
        if dist.norm <= epsilon:
            return InfiniteSolution(cur, cur.horizon, dist, trace)
        if last is not None and dist.norm > last.norm + 3 * (dist.se + last.se):
            raise ConvergenceError("distance increased along the doubling schedule", trace)
        prev, last = cur, dist


@dataclass
class StationaryField:
    """Samples of ``v(t, x) = Y_{T-t}^{T-t,x}`` per environment.

    ``values`` has shape ``(E, len(t_grid), len(x_grid))``; ``x_grid`` holds
    points of shape ``(d,)``.
    """

    T: float
    t_grid: np.ndarray
    x_grid: np.ndarray
    values: np.ndarray
    seeds: list[int]
    horizons: np.ndarray
    distances: np.ndarray
    epsilon: float

    @property
    def E(self) -> int:
        return self.values.shape[0]

    def slice_at(self, t: float, x) -> np.ndarray:
        i = int(np.argmin(np.abs(self.t_grid - t)))
        j = int(np.argmin(np.linalg.norm(self.x_grid - np.atleast_1d(x), axis=1)))
        if not math.isclose(self.t_grid[i], t, abs_tol=1e-9):
            raise KeyError(f"t={t} is not on the field's t-grid")
        return self.values[:, i, j]

    def export(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["environment", "seed", "t", "x", "v", "n", "distance"])
            for e, seed in enumerate(self.seeds):
                for i, t in enumerate(self.t_grid):
                    for j, x in enumerate(self.x_grid):
                        wr.writerow([e, seed, repr(float(t)), " ".join(repr(float(v)) for v in x),
                                     repr(float(self.values[e, i, j])),
                                     repr(float(self.horizons[e, i, j])),
                                     repr(float(self.distances[e, i, j]))])


def _grid_points(x_grid, d):
    pts = np.asarray(x_grid, dtype=float)
    return pts.reshape(-1, d)


def build_stationary_field(model: ModelSpec, T: float, t_grid, x_grid, env: Environment,
                           epsilon: float, config: SolverConfig) -> StationaryField:
    """``v(t, x)`` for one environment: a converged solve from ``(T - t, x)`` per point."""
    if not math.isclose(env.T, T):
        env = replace(env, T=T)
    t_grid = np.asarray(t_grid, dtype=float)
    if np.any(t_grid < 0) or np.any(t_grid > T + 1e-12):
        raise ValueError("t_grid must lie in [0, T]")
    pts = _grid_points(x_grid, model.d)
    shape = (1, len(t_grid), len(pts))
    values, horizons, dists = np.zeros(shape), np.zeros(shape), np.zeros(shape)
    for i, t in enumerate(t_grid):
        s = round((T - t) / env.h) * env.h
        for j, x in enumerate(pts):
            res = solve_infinite(model, s, x, env, epsilon, config)
            values[0, i, j] = res.y0
            horizons[0, i, j] = res.n
            dists[0, i, j] = res.distance.norm
    return StationaryField(T, t_grid, pts, values, [env.seed], horizons, dists, epsilon)


def stationary_field(model: ModelSpec, T: float, t_grid, x_grid, seeds: Sequence[int],
                     epsilon: float, config: SolverConfig, h: float, workers: int = 1,
                     **env_kwargs) -> StationaryField:
    """Stack :func:`build_stationary_field` over environments, one per seed.

    Environments are independent; with ``workers > 1`` they run in parallel
    and are reassembled in seed order.
    """
    def one(seed):
        env = Environment(seed=seed, T=T, h=h, M=config.M, d=model.d, l=model.l, **env_kwargs)
        return build_stationary_field(model, T, t_grid, x_grid, env, epsilon, config)

    if workers > 1:
        from joblib import Parallel, delayed

        parts = Parallel(n_jobs=workers)(delayed(one)(s) for s in seeds)
    else:
        parts = [one(s) for s in seeds]
    return StationaryField(
        T, parts[0].t_grid, parts[0].x_grid,
        np.concatenate([p.values for p in parts]), list(seeds),
        np.concatenate([p.horizons for p in parts]),
        np.concatenate([p.distances for p in parts]), epsilon,
    )


@dataclass(frozen=True)
class TIndependence:
    v_T: float
    v_T2: float
    T: float
    T2: float

    @property
    def deviation(self) -> float:
        return abs(self.v_T - self.v_T2)


def check_T_independence(model: ModelSpec, t: float, x, T: float, T2: float,
                         env: Environment, epsilon: float,
                         config: SolverConfig) -> TIndependence:
    """Compare ``v(t, x)`` built from reference horizons ``T`` and ``T2 >= T`` on one ``B`` stream."""
    if T2 < T:
        raise ValueError("T2 must be >= T")
    a = solve_infinite(model, T - t, x, replace(env, T=T), epsilon, config)
    b = solve_infinite(model, T2 - t, x, replace(env, T=T2), epsilon, config)
    return TIndependence(a.y0, b.y0, T, T2)
