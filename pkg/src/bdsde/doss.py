"""Doss–Sussmann flow, its inverse, the transformed driver and a PDE residual.

The flow solves, for each frozen ``(x, y)``,

    λ(t,x,y) = y + ½ ∫_0^t <g, D_y g>(x, λ) ds - ∫_0^t <g(x, λ), dB_s>

on the time grid of the supplied ``B`` increments.  Derivatives of ``λ`` are
central differences taken with common random numbers: every perturbed start
is integrated against the same ``B`` path.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ModelSpec
from .noise import IncrementArray, TimeGrid

FD_STEP = 1e-4
BISECTION_TOL = 1e-8


class FlowError(ArithmeticError):
    """The flow lost monotonicity in ``y`` or a target lies outside its range."""


def _flow_step(g, dg, x, lam, db, h, scheme):
    gv = g(x, lam)
    dgv = dg(x, lam)
    out = lam + 0.5 * np.sum(gv * dgv, axis=-1) * h - gv @ db
    if scheme == "milstein":
        # commutative-noise Milstein correction ½ Σ_jk g_j ∂_y g_k (ΔB_j ΔB_k - δ_jk h)
        out = out + 0.5 * ((gv @ db) * (dgv @ db) - np.sum(gv * dgv, axis=-1) * h)
    return out


def integrate_flow(g: Callable, dg: Callable, B: IncrementArray, x: np.ndarray, y: np.ndarray,
                   n_steps: int | None = None, scheme: str = "milstein",
                   keep: bool = False) -> np.ndarray:
    """Integrate the flow from starts ``(x[k], y[k])`` over the first ``n_steps`` increments.

    Returns ``λ`` at the final step, or at every node (leading axis) when
    ``keep`` is set.
    """
    if scheme not in ("euler", "milstein"):
        raise ValueError(f"unknown scheme {scheme!r}")
    n_steps = B.n_steps if n_steps is None else n_steps
    lam = np.array(y, dtype=float)
    hist = [lam] if keep else None
    for i in range(n_steps):
        lam = _flow_step(g, dg, x, lam, B.data[i], B.grid.h, scheme)
        if keep:
            hist.append(lam)
    return np.stack(hist) if keep else lam


@dataclass
class FlowGrid:
    """``λ`` on ``t_grid × x_grid × y_grid`` for one ``B`` path.

    ``lam`` has shape ``(n_t, n_x, n_y)``; ``x_grid`` has shape ``(n_x, d)``.
    """

    t_grid: np.ndarray
    x_grid: np.ndarray
    y_grid: np.ndarray
    B: IncrementArray
    lam: np.ndarray = field(repr=False)
    g: Callable = field(repr=False)
    dg: Callable = field(repr=False)
    scheme: str = "milstein"

    def t_index(self, t: float) -> int:
        return self.B.grid.index_of(t)

    def x_index(self, x) -> int:
        x = np.atleast_1d(np.asarray(x, dtype=float))
        dist = np.linalg.norm(self.x_grid - x, axis=1)
        j = int(np.argmin(dist))
        if dist[j] > 1e-9:
            raise KeyError(f"x={x} is not on the flow's x-grid")
        return j

    def values(self, t_index: int, x, y) -> np.ndarray:
        """``λ(t, x, y)`` at arbitrary starts, re-integrated on the same ``B`` path."""
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        x = np.broadcast_to(x, y.shape + (self.x_grid.shape[1],))
        return integrate_flow(self.g, self.dg, self.B, x, y, t_index, self.scheme)

    def interpolate(self, t_index: int, x_index: int, y) -> np.ndarray:
        """Piecewise-linear ``λ(t, x, ·)`` between y-grid nodes."""
        return np.interp(y, self.y_grid, self.lam[t_index, x_index])

    def derivatives(self, t_index: int, x, y: float, step: float = FD_STEP) -> dict:
        """``λ, D_yλ, D_yyλ, D_xλ, D_xyλ, D_xxλ`` at one point by central differences."""
        x = np.atleast_1d(np.asarray(x, dtype=float))
        d = x.size
        dy = step * (1.0 + abs(y))
        dx = step * (1.0 + np.abs(x))
        eye = np.eye(d)
        xs, ys = [x, x, x], [y, y + dy, y - dy]
        for k in range(d):
            e = dx[k] * eye[k]
            xs += [x + e, x - e, x + e, x + e, x - e, x - e]
            ys += [y, y, y + dy, y - dy, y + dy, y - dy]
            for j in range(k + 1, d):
                f = dx[j] * eye[j]
                xs += [x + e + f, x + e - f, x - e + f, x - e - f]
                ys += [y] * 4
        lam = self.values(t_index, np.array(xs), np.array(ys))
        if np.array_equal(lam, np.array(ys)):
            # the flow is the identity on the whole stencil
            return {"lam": float(y), "dy": 1.0, "dyy": 0.0, "dx": np.zeros(d),
                    "dxy": np.zeros(d), "dxx": np.zeros((d, d))}
        c, yp, ym = lam[0], lam[1], lam[2]
        out = {"lam": c, "dy": (yp - ym) / (2 * dy), "dyy": (yp - 2 * c + ym) / dy**2,
               "dx": np.zeros(d), "dxy": np.zeros(d), "dxx": np.zeros((d, d))}
        pos = 3
        for k in range(d):
            xp, xm, pp, pm, mp, mm = lam[pos:pos + 6]
            pos += 6
            out["dx"][k] = (xp - xm) / (2 * dx[k])
            out["dxx"][k, k] = (xp - 2 * c + xm) / dx[k] ** 2
            out["dxy"][k] = (pp - pm - mp + mm) / (4 * dx[k] * dy)
            for j in range(k + 1, d):
                a, b_, c_, e_ = lam[pos:pos + 4]
                pos += 4
                out["dxx"][k, j] = out["dxx"][j, k] = (a - b_ - c_ + e_) / (4 * dx[k] * dx[j])
        return out


def solve_flow(g: Callable, dg: Callable | None, B: IncrementArray, x_grid, y_grid,
               scheme: str = "milstein") -> FlowGrid:
    """``λ`` on every node of ``B``'s grid for each ``(x, y)`` in the product grid.

    ``dg`` may be ``None``; ``D_y g`` is then differenced centrally with step
    ``1e-5*(1+|y|)``.  Raises :class:`FlowError` if ``λ(t, x, ·)`` fails to be
    strictly increasing on the y-grid at any node.
    """
    y_grid = np.asarray(y_grid, dtype=float)
    if y_grid.ndim != 1 or np.any(np.diff(y_grid) <= 0):
        raise ValueError("y_grid must be strictly increasing")
    x_pts = np.asarray(x_grid, dtype=float)
    x_pts = x_pts.reshape(len(x_pts), -1)
    if dg is None:
        def dg(x, y, _g=g):
            step = 1e-5 * (1.0 + np.abs(y))
            return (np.asarray(_g(x, y + step)) - np.asarray(_g(x, y - step))) / (2 * step)[..., None]
    n_x, n_y = len(x_pts), len(y_grid)
    xs = np.broadcast_to(x_pts[:, None, :], (n_x, n_y, x_pts.shape[1]))
    ys = np.broadcast_to(y_grid, (n_x, n_y))
    lam = integrate_flow(g, dg, B, xs, ys, scheme=scheme, keep=True)
    slopes = np.diff(lam, axis=-1)
    if not np.all(slopes > 0):
        ti, xi, _ = np.unravel_index(int(np.argmin(slopes)), slopes.shape)
        raise FlowError(f"λ is not increasing in y at t={B.grid.nodes[ti]}, x={x_pts[xi]}; "
                        "reduce the step size or check g")
    return FlowGrid(B.grid.nodes, x_pts, y_grid, B, lam, g, dg, scheme)


def invert_flow(flow: FlowGrid, t_index: int, x_index: int, target) -> np.ndarray:
    """``ζ(t, x, target)``: bisection on the interpolated ``λ(t, x, ·)`` to ``1e-8`` in ``y``."""
    target = np.asarray(target, dtype=float)
    lam = flow.lam[t_index, x_index]
    if np.any(target < lam[0]) or np.any(target > lam[-1]):
        raise FlowError(f"target outside [{lam[0]}, {lam[-1]}]; enlarge the y-grid")
    lo = np.full(target.shape, flow.y_grid[0])
    hi = np.full(target.shape, flow.y_grid[-1])
    while np.max(hi - lo) > BISECTION_TOL:
        mid = 0.5 * (lo + hi)
        below = np.interp(mid, flow.y_grid, lam) < target
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


def transformed_driver(flow: FlowGrid, model: ModelSpec, t_index: int, x, y: float, z) -> float:
    """``f̃(t,x,y,z)`` of the random PDE obtained by the Doss–Sussmann change of variables."""
    co = model.coefficients
    x = np.atleast_1d(np.asarray(x, dtype=float))
    z = np.atleast_1d(np.asarray(z, dtype=float))
    der = flow.derivatives(t_index, x, y)
    if abs(der["dy"]) < 1e-8:
        raise FlowError(f"D_yλ = {der['dy']} is degenerate at t-index {t_index}, x={x}, y={y}")
    sig = co.diffusion(x[None])[0]
    a = sig @ sig.T
    gen_lam = 0.5 * np.sum(a * der["dxx"]) + co.drift(x[None])[0] @ der["dx"]
    zz = sig.T @ der["dx"] + der["dy"] * z
    total = (float(co.driver(x[None], np.array([der["lam"]]), zz[None])[0]) + gen_lam
             + (sig.T @ der["dxy"]) @ z + 0.5 * der["dyy"] * (z @ z))
    return float(total / der["dy"])


def transform_field(values: np.ndarray, t_grid, x_grid, flows) -> np.ndarray:
    """``ṽ = ζ(t, x, v(t, x))`` per environment.

    ``values`` has shape ``(E, n_t, n_x)`` and ``flows`` holds one
    :class:`FlowGrid` per environment, solved on that environment's ``B``.
    """
    values = np.asarray(values, dtype=float)
    if len(flows) != values.shape[0]:
        raise ValueError("need one flow per environment")
    out = np.empty_like(values)
    x_pts = np.asarray(x_grid, dtype=float).reshape(values.shape[2], -1)
    for e, flow in enumerate(flows):
        for i, t in enumerate(t_grid):
            ti = flow.t_index(float(t))
            for j, x in enumerate(x_pts):
                out[e, i, j] = invert_flow(flow, ti, flow.x_index(x), values[e, i, j])
    return out


def mollify(B: IncrementArray, window: int = 10) -> IncrementArray:
    """Increments of the trailing moving average of ``B`` over ``window`` steps."""
    path = B.path()
    kernel = np.ones(window) / window
    padded = np.concatenate([np.repeat(path[:1], window - 1, axis=0), path])
    smooth = np.stack([np.convolve(padded[:, k], kernel, mode="valid")
                       for k in range(B.dim)], axis=1)
    return IncrementArray(B.grid, B.dim, np.diff(smooth, axis=0), B.seed, B.stream,
                          B.first_index, B.reversed)


@dataclass(frozen=True)
class Residual:
    t: np.ndarray
    x: np.ndarray
    values: np.ndarray
    mollified: bool

    def export(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["t", "x", "residual", "mollified"])
            for i, t in enumerate(self.t):
                for j, x in enumerate(self.x):
                    wr.writerow([repr(float(t)), repr(float(x)), repr(float(self.values[i, j])),
                                 int(self.mollified)])


def pde_residual(vtilde: np.ndarray, t_grid, x_grid, model: ModelSpec,
                 flow: FlowGrid | None = None, mollified: bool = False) -> Residual:
    """Residual ``∂_t ṽ - 𝓛ṽ - f̃(t, x, ṽ, σ^* Dṽ)`` on interior nodes (``d = 1``).

    Without a flow the transformation is the identity and ``f̃ = f``.  A flow
    built on mollified increments should be flagged with ``mollified``.
    Diagnostic only; no verdict is attached.
    """
    if model.d != 1:
        raise ValueError("the residual diagnostic is implemented for d = 1")
    v = np.asarray(vtilde, dtype=float)
    t = np.asarray(t_grid, dtype=float)
    x = np.asarray(x_grid, dtype=float).reshape(-1)
    dt, dx = t[1] - t[0], x[1] - x[0]
    co = model.coefficients
    vt = (v[2:, 1:-1] - v[:-2, 1:-1]) / (2 * dt)
    vx = (v[1:-1, 2:] - v[1:-1, :-2]) / (2 * dx)
    vxx = (v[1:-1, 2:] - 2 * v[1:-1, 1:-1] + v[1:-1, :-2]) / dx**2
    xi = x[1:-1, None]
    b = co.drift(xi)[:, 0]
    s = co.diffusion(xi)[:, 0, 0]
    res = np.empty_like(vt)
    for i in range(vt.shape[0]):
        vi = v[i + 1, 1:-1]
        z = s * vx[i]
        gen = 0.5 * s**2 * vxx[i] + b * vx[i]
        if flow is None:
            ft = co.driver(xi, vi, z[:, None])
        else:
            ti = flow.t_index(float(t[i + 1]))
            ft = np.array([transformed_driver(flow, model, ti, xi[j], vi[j], z[j])
                           for j in range(len(vi))])
        res[i] = vt[i] - gen - ft
    return Residual(t[1:-1], x[1:-1], res, mollified)


def export_flow(flow: FlowGrid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t", "x", "y", "lambda"])
        for i, t in enumerate(flow.t_grid):
            for j, x in enumerate(flow.x_grid):
                xs = " ".join(repr(float(v)) for v in x)
                for k, y in enumerate(flow.y_grid):
                    wr.writerow([repr(float(t)), xs, repr(float(y)), repr(float(flow.lam[i, j, k]))])
