"""Euler–Maruyama ensembles of the forward diffusion and their structural checks."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import ModelSpec
from .noise import IncrementArray, TimeGrid, generate_increments, shift_increments


@dataclass(frozen=True)
class ForwardEnsemble:
    """``M`` Euler paths of ``X_s^{t,x}`` on a grid.

    ``states`` is stored time-major, shape ``(n_steps+1, M, d)``; nodes
    before ``start_index`` hold the frozen start value.
    """

    grid: TimeGrid
    t: float
    start_index: int
    states: np.ndarray = field(repr=False)
    streams: tuple = ()
    model_name: str = ""

    @property
    def M(self) -> int:
        return self.states.shape[1]

    @property
    def d(self) -> int:
        return self.states.shape[2]

    @property
    def paths(self) -> np.ndarray:
        """View with shape ``(M, n_steps+1, d)``."""
        return self.states.transpose(1, 0, 2)

    def truncated(self, n_steps: int) -> "ForwardEnsemble":
        """The same paths on the first ``n_steps`` steps of the grid."""
        if not self.start_index <= n_steps <= self.grid.n_steps:
            raise ValueError(f"cannot truncate to {n_steps} steps")
        grid = TimeGrid(self.grid.t0, self.grid.h, n_steps)
        return ForwardEnsemble(grid, self.t, self.start_index, self.states[: n_steps + 1],
                               self.streams, self.model_name)

    def node_mean(self) -> np.ndarray:
        return self.states.mean(axis=1)

    def node_var(self) -> np.ndarray:
        return self.states.var(axis=1, ddof=1)


def _start_states(x, M: int, d: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 0:
        x = x.reshape(1)
    if x.shape == (d,):
        return np.broadcast_to(x, (M, d)).copy()
    if x.shape == (M, d):
        return x.copy()
    raise ValueError(f"start point shape {x.shape} is neither ({d},) nor ({M}, {d})")


def simulate_forward(model: ModelSpec, grid: TimeGrid, t: float, x, w: IncrementArray,
                     M: int) -> ForwardEnsemble:
    """Euler–Maruyama: ``X_{i+1} = X_i + b(X_i) h + σ(X_i) ΔW_i`` for nodes at or after ``t``.

    ``w`` carries all paths at once: its ``dim`` is ``M*d`` with path ``m``
    in columns ``m*d .. m*d+d-1``.  ``x`` is a single point or one start
    state per path.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    d = model.d
    if w.grid.h != grid.h or w.n_steps != grid.n_steps or w.grid.t0 != grid.t0:
        raise ValueError(f"increments on {w.grid} do not match {grid}")
    if w.dim != M * d:
        raise ValueError(f"increment dim {w.dim} != M*d = {M * d}")
    start = grid.index_of(t)
    co = model.coefficients
    dw = w.data.reshape(grid.n_steps, M, d)
    states = np.empty((grid.n_steps + 1, M, d))
    states[: start + 1] = _start_states(x, M, d)
    h = grid.h
    for i in range(start, grid.n_steps):
        xi = states[i]
        step = co.drift(xi) * h + np.einsum("mij,mj->mi", co.diffusion(xi), dw[i])
        nxt = xi + step
        if not np.all(np.isfinite(nxt)):
            m = int(np.argmax(~np.isfinite(nxt).all(axis=1)))
            raise FloatingPointError(f"non-finite state on path {m} at step {i}")
        states[i + 1] = nxt
    return ForwardEnsemble(grid, t, start, states, ((w.seed, w.stream),), model.name)


def extend_forward(model: ModelSpec, ens: ForwardEnsemble, w: IncrementArray) -> ForwardEnsemble:
    """Continue ``ens`` onto the longer grid of ``w`` from its last node.

    ``w`` must agree with the increments that produced ``ens`` on the common
    prefix; by the flow property the result equals a fresh simulation.
    """
    old = ens.grid
    grid = w.grid
    if grid.t0 != old.t0 or grid.h != old.h or grid.n_steps < old.n_steps:
        raise ValueError(f"{grid} does not extend {old}")
    if grid.n_steps == old.n_steps:
        return ens
    M, d = ens.M, ens.d
    tail_w = w.window(old.n_steps, grid.n_steps - old.n_steps)
    tail = simulate_forward(model, tail_w.grid, tail_w.grid.t0, ens.states[-1], tail_w, M)
    states = np.concatenate([ens.states, tail.states[1:]])
    return ForwardEnsemble(grid, ens.t, ens.start_index, states, ens.streams, ens.model_name)


def ensemble_increments(grid: TimeGrid, M: int, d: int, seed: int, stream: int,
                        first_index: int = 0) -> IncrementArray:
    """One counter stream carrying the increments of all ``M`` paths."""
    return generate_increments(grid, M * d, seed, stream, first_index)


def check_flow_property(model: ModelSpec, grid: TimeGrid, t: float, x, T_mid: float,
                        w: IncrementArray, M: int,
                        restart_w: IncrementArray | None = None) -> float:
    """Max ``|X_s^{T_mid, X_{T_mid}^{t,x}} - X_s^{t,x}|`` over paths and nodes ``s >= T_mid``.

    The restarted run reuses ``w`` unless ``restart_w`` is given (used as a
    negative control); a restart array on a different grid is an error.
    """
    if restart_w is not None and (restart_w.grid != w.grid or restart_w.dim != w.dim):
        raise ValueError("restart increments do not match the original increments")
    mid = grid.index_of(T_mid)
    if mid < grid.index_of(t):
        raise ValueError("T_mid must not precede t")
    full = simulate_forward(model, grid, t, x, w, M)
    again = simulate_forward(model, grid, T_mid, full.states[mid],
                             w if restart_w is None else restart_w, M)
    return float(np.max(np.abs(again.states[mid:] - full.states[mid:])))


def check_shift_property(model: ModelSpec, grid: TimeGrid, t: float, x, r_steps: int,
                         w: IncrementArray, M: int,
                         shifted: IncrementArray | None = None) -> float:
    """Max deviation between ``θ̂_r ∘ X_s^{t,x}`` and ``X_{s+r}^{t+r,x}`` on the overlap.

    The shifted run uses ``shift_increments(w, r_steps)`` unless ``shifted``
    is supplied (negative controls pass a wrongly seeded array).
    """
    if r_steps < 0:
        raise ValueError("r_steps must be >= 0")
    start = grid.index_of(t)
    if start + r_steps > grid.n_steps:
        raise ValueError("t + r lies beyond the grid")
    a = simulate_forward(model, grid, t, x, shift_increments(w, r_steps) if shifted is None
                         else shifted, M)
    b = simulate_forward(model, grid, grid.nodes[start + r_steps], x, w, M)
    end = grid.n_steps - r_steps
    return float(np.max(np.abs(a.states[start:end + 1]
                               - b.states[start + r_steps:end + r_steps + 1])))


@dataclass(frozen=True)
class HolderEstimate:
    estimate: float
    bound_seed: float
    tail_bound: float
    horizon: float

    @property
    def ratio(self) -> float:
        return self.estimate / self.bound_seed if self.bound_seed > 0 else math.nan


def _exp_weights(nodes: np.ndarray, K: float) -> np.ndarray:
    """Weights ``w_i`` with ``Σ w_i m_i = ∫ e^{-Kr} m(r) dr`` for piecewise-linear ``m``."""
    h = np.diff(nodes)
    a, e = np.exp(-K * nodes[:-1]), np.exp(-K * nodes[1:])
    # ∫ over a cell of e^{-Kr} times the left/right hat functions
    left = a / K - (a - e) / (K**2 * h)
    right = -e / K + (a - e) / (K**2 * h)
    out = np.zeros_like(nodes)
    out[:-1] += left
    out[1:] += right
    return out


def holder_estimate(model: ModelSpec, pairs: Sequence[tuple[tuple[float, float],
                                                            tuple[float, float]]],
                    p: float, K: float, M: int, h: float, seed: int, stream: int = 0,
                    horizon: float | None = None) -> list[HolderEstimate]:
    """Estimate ``E ∫_0^∞ e^{-Kr} |X_r^{t',x'} - X_r^{t,x}|^p dr`` for each pair.

    Both members of a pair share the same increments.  The integral runs to
    ``R = max(10/K, horizon)`` with the last moment held constant beyond
    ``R``; ``tail_bound`` is ``e^{-KR} max_r m(r) / K``.
    """
    out = []
    R = max(10.0 / K, horizon or 0.0)
    grid = TimeGrid(0.0, h, int(math.ceil(R / h)))
    R = grid.t1
    w = ensemble_increments(grid, M, model.d, seed, stream)
    weights = _exp_weights(grid.nodes, K)
    for (t, x), (t2, x2) in pairs:
        a = simulate_forward(model, grid, t, np.atleast_1d(x), w, M)
        b = simulate_forward(model, grid, t2, np.atleast_1d(x2), w, M)
        diff = np.linalg.norm(b.states - a.states, axis=2)
        moment = np.mean(diff**p, axis=1)
        est = float(weights @ moment + math.exp(-K * R) * moment[-1] / K)
        dx = float(np.linalg.norm(np.atleast_1d(x2) - np.atleast_1d(x)))
        seed_bound = dx**p + abs(t2 - t) ** (p / 2)
        out.append(HolderEstimate(est, seed_bound, math.exp(-K * R) * float(moment.max()) / K, R))
    return out


def export_ensemble(ens: ForwardEnsemble, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["path", "step", "component", "value"])
        for m in range(ens.M):
            for i in range(ens.grid.n_steps + 1):
                for k in range(ens.d):
                    wr.writerow([m, i, k, repr(float(ens.states[i, m, k]))])


def export_summary(ens: ForwardEnsemble, path: str | Path) -> None:
    mean = ens.node_mean()
    var = ens.node_var() if ens.M > 1 else np.zeros_like(mean)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["step", "t", "component", "mean", "variance"])
        for i, t in enumerate(ens.grid.nodes):
            for k in range(ens.d):
                wr.writerow([i, repr(float(t)), k, repr(float(mean[i, k])),
                             repr(float(var[i, k]))])
