"""Counter-based Brownian increments with exact reversal and shift.

Every Gaussian draw is a pure function of ``(seed, stream, step index)``:
the step index selects a block of Philox counters and the ``(seed, stream)``
pair forms the Philox key.  Windows over the same stream therefore agree on
their overlap bit-for-bit, which is what makes :func:`shift_increments` an
exact re-windowing instead of a re-draw.  Step indices may be negative so a
stream can be read as a two-sided path.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtri

# Step indices are offset so that negative indices never wrap the counter.
_COUNTER_OFFSET = 1 << 128
_WORDS_PER_BLOCK = 4


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid ``t_i = t0 + i*h`` for ``i = 0..n_steps``."""

    t0: float
    h: float
    n_steps: int

    def __post_init__(self):
        if not (math.isfinite(self.t0) and self.t0 >= 0):
            raise ValueError(f"t0 must be finite and >= 0, got {self.t0}")
        if not (math.isfinite(self.h) and self.h > 0):
            raise ValueError(f"step size must be positive, got {self.h}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @classmethod
    def covering(cls, t0: float, t1: float, h: float) -> "TimeGrid":
        """Grid from ``t0`` to ``t1``; the span must be a whole number of steps."""
        n = round((t1 - t0) / h)
        if n < 1 or not math.isclose(n * h, t1 - t0, rel_tol=1e-9, abs_tol=1e-12):
            raise ValueError(f"[{t0}, {t1}] is not a whole number of steps of {h}")
        return cls(t0, h, int(n))

    @property
    def t1(self) -> float:
        return self.t0 + self.n_steps * self.h

    @property
    def nodes(self) -> np.ndarray:
        return self.t0 + self.h * np.arange(self.n_steps + 1)

    def index_of(self, t: float) -> int:
        """Index of the node at time ``t``; raises if ``t`` is not a node."""
        i = round((t - self.t0) / self.h)
        if i < 0 or i > self.n_steps or not math.isclose(
            self.t0 + i * self.h, t, rel_tol=1e-9, abs_tol=1e-9
        ):
            raise ValueError(f"t={t} is not a node of {self}")
        return int(i)

    def steps_for(self, duration: float) -> int:
        n = round(duration / self.h)
        if not math.isclose(n * self.h, duration, rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError(f"duration {duration} is not a multiple of h={self.h}")
        return int(n)


@dataclass(frozen=True)
class IncrementArray:
    """Increments ``Δ_i`` over ``[t_i, t_{i+1}]`` of a ``dim``-dimensional path.

    ``first_index`` is the counter position of entry 0 in the underlying
    stream and ``sign`` is -1 for reversed views.  Together with
    ``(seed, stream)`` they make the array regenerable and extendable.
    """

    grid: TimeGrid
    dim: int
    data: np.ndarray = field(repr=False)
    seed: int | None = None
    stream: int | None = None
    first_index: int = 0
    reversed: bool = False

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != (self.grid.n_steps, self.dim):
            raise ValueError(
                f"data shape {data.shape} does not match ({self.grid.n_steps}, {self.dim})"
            )
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n_steps(self) -> int:
        return self.grid.n_steps

    def path(self) -> np.ndarray:
        """Cumulative path values at the grid nodes, starting from 0."""
        out = np.zeros((self.n_steps + 1, self.dim))
        np.cumsum(self.data, axis=0, out=out[1:])
        return out

    def window(self, start: int, n_steps: int) -> "IncrementArray":
        """Entries ``start .. start+n_steps-1`` of the (extended) stream.

        The returned grid starts at ``t0 + start*h``.  Entries outside the
        stored range are regenerated from the counter stream.
        """
        if start < 0:
            raise ValueError("window start must be >= 0")
        grid = TimeGrid(self.grid.t0 + start * self.grid.h, self.grid.h, n_steps)
        if start + n_steps <= self.n_steps:
            data = self.data[start:start + n_steps]
        else:
            data = self._extended(start, n_steps)
        return replace(self, grid=grid, data=data, first_index=self._index_at(start))

    def _index_at(self, offset: int) -> int:
        return self.first_index - offset if self.reversed else self.first_index + offset

    def _extended(self, start: int, n_steps: int) -> np.ndarray:
        if self.seed is None or self.stream is None:
            raise ValueError("array has no counter provenance and cannot be extended")
        scale = math.sqrt(self.grid.h)
        if not self.reversed:
            return scale * standard_normals(self.seed, self.stream, self.first_index + start,
                                            n_steps, self.dim)
        lo = self.first_index - start - n_steps + 1
        block = standard_normals(self.seed, self.stream, lo, n_steps, self.dim)
        return -scale * block[::-1]


def standard_normals(seed: int, stream: int, first: int, n: int, dim: int) -> np.ndarray:
    """``(n, dim)`` standard Gaussians for step indices ``first .. first+n-1``."""
    if not (0 <= seed < 1 << 64 and 0 <= stream < 1 << 64):
        raise ValueError("seed and stream must fit in 64 unsigned bits")
    if n == 0:
        return np.zeros((0, dim))
    blocks = -(-dim // _WORDS_PER_BLOCK)
    words = blocks * _WORDS_PER_BLOCK
    bitgen = np.random.Philox(
        key=(seed << 64) | stream, counter=(first + _COUNTER_OFFSET) * blocks
    )
    raw = bitgen.random_raw(n * words).reshape(n, words)[:, :dim]
    u = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return ndtri(u)


def generate_increments(grid: TimeGrid, dim: int, seed: int, stream: int,
                        first_index: int = 0) -> IncrementArray:
    """Gaussian increments ``sqrt(h)*ξ_i`` keyed by ``(seed, stream, first_index + i)``."""
    if dim < 1:
        raise ValueError(f"dim must be >= 1, got {dim}")
    data = math.sqrt(grid.h) * standard_normals(seed, stream, first_index, grid.n_steps, dim)
    return IncrementArray(grid, dim, data, seed, stream, first_index)


def reverse_path(b: IncrementArray, T: float) -> IncrementArray:
    """Increments of ``B̂_s = B_{T-s} - B_T`` given increments of ``B`` on ``[0, T]``.

    The array order is reversed and every entry negated.  The result keeps
    its counter provenance, so it extends past ``T`` into the negative-time
    part of the two-sided stream.
    """
    if b.grid.t0 != 0 or not math.isclose(b.grid.t1, T, rel_tol=1e-9, abs_tol=1e-12):
        raise ValueError(f"grid {b.grid} does not cover [0, {T}] exactly")
    return replace(
        b,
        data=-b.data[::-1],
        first_index=b._index_at(b.n_steps - 1),
        reversed=not b.reversed,
    )


def reversed_environment(seed: int, stream: int, T_steps: int, n_steps: int, h: float,
                         dim: int) -> IncrementArray:
    """``B̂`` increments on ``[0, n_steps*h]`` for the reversal at ``T = T_steps*h``.

    Entry ``i`` is ``-ΔB`` at two-sided step ``T_steps - 1 - i``; entries with
    ``i >= T_steps`` read the negative-time half of the stream.
    """
    grid = TimeGrid(0.0, h, n_steps)
    base = IncrementArray(grid, dim, np.zeros((n_steps, dim)), seed, stream,
                          first_index=T_steps - 1, reversed=True)
    return replace(base, data=base._extended(0, n_steps))


def shift_increments(arr: IncrementArray, r_steps: int) -> IncrementArray:
    """Increments of the shifted path ``θ̂_r``: output entry ``i`` is input entry ``i + r``.

    The grid is kept, so the shifted array covers the same times as the input.
    """
    if r_steps < 0:
        raise ValueError("only forward shifts r_steps >= 0 are supported")
    if r_steps == 0:
        return arr
    moved = arr.window(r_steps, arr.n_steps)
    return replace(moved, grid=arr.grid)


def dump_csv(arr: IncrementArray, path: str | Path) -> None:
    """Write ``step, component, value`` rows after a provenance header."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# seed={arr.seed} stream={arr.stream} h={arr.grid.h!r} "
                 f"n_steps={arr.n_steps} t0={arr.grid.t0!r} dim={arr.dim} "
                 f"first_index={arr.first_index} reversed={int(arr.reversed)}\n")
        writer = csv.writer(fh)
        writer.writerow(["step", "component", "value"])
        for i, row in enumerate(arr.data):
            for k, v in enumerate(row):
                writer.writerow([i, k, repr(float(v))])


def load_csv(path: str | Path) -> IncrementArray:
    with open(path, newline="") as fh:
        header = fh.readline()
        if not header.startswith("#"):
            raise ValueError(f"{path}: missing provenance header")
        meta = dict(item.split("=", 1) for item in header[1:].split())
        rows = list(csv.DictReader(fh))
    n, dim = int(meta["n_steps"]), int(meta["dim"])
    data = np.zeros((n, dim))
    for row in rows:
        data[int(row["step"]), int(row["component"])] = float(row["value"])

    def _opt(key):
        return None if meta[key] == "None" else int(meta[key])

    grid = TimeGrid(float(meta["t0"]), float(meta["h"]), n)
    return IncrementArray(grid, dim, data, _opt("seed"), _opt("stream"),
                          int(meta["first_index"]), bool(int(meta["reversed"])))


def coarsen(arr: IncrementArray, factor: int) -> IncrementArray:
    """Sum groups of ``factor`` consecutive increments (same path, coarser grid)."""
    if factor < 1 or arr.n_steps % factor:
        raise ValueError(f"{arr.n_steps} steps cannot be grouped by {factor}")
    data = arr.data.reshape(arr.n_steps // factor, factor, arr.dim).sum(axis=1)
    grid = TimeGrid(arr.grid.t0, arr.grid.h * factor, arr.n_steps // factor)
    return IncrementArray(grid, arr.dim, data)
