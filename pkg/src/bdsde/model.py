"""Coefficients, structural constants, and falsification probes.

Coefficient functions are vectorised over leading axes:

* ``b(x)``: ``(..., d) -> (..., d)``
* ``sigma(x)``: ``(..., d) -> (..., d, d)``
* ``f(x, y, z)``: ``(..., d), (...), (..., d) -> (...)``
* ``g(x, y)``: ``(..., d), (...) -> (..., l)``
* ``dg_dy(x, y)``: same shapes as ``g``
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Callable, Sequence

import numpy as np

VIOLATION_TOL = 1e-10


class AssumptionError(ValueError):
    """A structural constant is missing, non-finite, or a gated condition fails."""


@dataclass(frozen=True)
class CoefficientSet:
    b: Callable
    sigma: Callable
    f: Callable
    g: Callable
    dg_dy: Callable | None = None
    d: int = 1
    l: int = 1
    name: str = "custom"

    def drift(self, x):
        return np.asarray(self.b(np.asarray(x, dtype=float)), dtype=float)

    def diffusion(self, x):
        return np.asarray(self.sigma(np.asarray(x, dtype=float)), dtype=float)

    def driver(self, x, y, z):
        return np.asarray(self.f(x, y, z), dtype=float)

    def noise(self, x, y):
        return np.asarray(self.g(x, y), dtype=float)

    def noise_dy(self, x, y):
        """``D_y g``; central differences with step ``1e-5*(1+|y|)`` if not supplied."""
        if self.dg_dy is not None:
            return np.asarray(self.dg_dy(x, y), dtype=float)
        y = np.asarray(y, dtype=float)
        step = 1e-5 * (1.0 + np.abs(y))
        up = self.noise(x, y + step)
        dn = self.noise(x, y - step)
        return (up - dn) / (2.0 * step)[..., None]


@dataclass(frozen=True)
class AssumptionConstants:
    mu: float
    K: float
    Kprime: float
    p: float
    C0: float = 0.0
    C1: float = 0.0
    C: float = 0.0
    alpha: float = 0.0
    L: float = 0.0
    d: int = 1
    l: int = 1

    def __post_init__(self):
        for fld in fields(self):
            value = getattr(self, fld.name)
            if value is None or not math.isfinite(value):
                raise AssumptionError(f"constant {fld.name} must be finite, got {value!r}")


@dataclass(frozen=True)
class Condition:
    name: str
    expression: str
    value: float
    passed: bool


@dataclass(frozen=True)
class AssumptionReport:
    conditions: tuple[Condition, ...]

    def __getitem__(self, name: str) -> Condition:
        for c in self.conditions:
            if c.name == name:
                return c
        raise KeyError(name)

    @property
    def all_passed(self) -> bool:
        return all(c.passed for c in self.conditions)

    @property
    def structural(self) -> bool:
        """The conditions the solver gates on: p, K', alpha and the H2 margin."""
        return all(self[n].passed for n in ("p>d+2", "K<K'<2K", "H2-margin", "0<=alpha<1/2"))

    @property
    def margin_warning(self) -> str | None:
        a3, h2 = self["A3-margin"].passed, self["H2-margin"].passed
        if a3 != h2:
            held = "H2" if h2 else "A3"
            return f"only the {held} form of the monotonicity margin holds"
        return None

    def rows(self) -> list[tuple[str, str, float, bool]]:
        return [(c.name, c.expression, c.value, c.passed) for c in self.conditions]


def check_assumptions(constants: AssumptionConstants) -> AssumptionReport:
    """Evaluate every structural inequality; failures are reported, not raised."""
    c = constants
    binom = c.p * (c.p + 1) / 2 * c.C
    a3 = 2 * c.mu - c.p / 2 * c.Kprime - binom
    h2 = 2 * c.mu - c.Kprime - binom
    a4 = c.K - c.p * c.L - c.p * (c.p - 1) / 2 * c.L**2
    conditions = (
        Condition("p>d+2", "p - (d+2)", c.p - (c.d + 2), c.p > c.d + 2),
        Condition("K<K'<2K", "min(K'-K, 2K-K')", min(c.Kprime - c.K, 2 * c.K - c.Kprime),
                  c.K < c.Kprime < 2 * c.K),
        Condition("A3-margin", "2mu - (p/2)K' - p(p+1)/2 C", a3, a3 > 0),
        Condition("H2-margin", "2mu - K' - p(p+1)/2 C", h2, h2 > 0),
        Condition("A4-margin", "K - pL - p(p-1)/2 L^2", a4, a4 > 0),
        Condition("0<=alpha<1/2", "alpha", c.alpha, 0 <= c.alpha < 0.5),
    )
    return AssumptionReport(conditions)


@dataclass(frozen=True)
class ModelSpec:
    coefficients: CoefficientSet
    constants: AssumptionConstants
    override: bool = False

    def __post_init__(self):
        co, cs = self.coefficients, self.constants
        if (co.d, co.l) != (cs.d, cs.l):
            raise AssumptionError(
                f"coefficient dimensions (d={co.d}, l={co.l}) disagree with "
                f"constants (d={cs.d}, l={cs.l})"
            )

    @property
    def d(self) -> int:
        return self.coefficients.d

    @property
    def l(self) -> int:
        return self.coefficients.l

    @property
    def name(self) -> str:
        return self.coefficients.name

    def report(self) -> AssumptionReport:
        return check_assumptions(self.constants)

    def require_gate(self) -> AssumptionReport:
        """Raise unless the structural conditions hold or ``override`` is set."""
        rep = self.report()
        if not rep.structural and not self.override:
            failed = [c.name for c in rep.conditions if not c.passed]
            raise AssumptionError(f"model {self.name!r} fails {failed}; set override to proceed")
        return rep


# -- probing ---------------------------------------------------------------

@dataclass(frozen=True)
class Box:
    """Sampling box for the probes: bounds for x (per component), y and z."""

    x: tuple[float, float] = (-1.0, 1.0)
    y: tuple[float, float] = (-1.0, 1.0)
    z: tuple[float, float] = (-1.0, 1.0)

    def __post_init__(self):
        for name in ("x", "y", "z"):
            lo, hi = getattr(self, name)
            if not hi > lo:
                raise ValueError(f"box side {name}={lo, hi} has no volume")


@dataclass(frozen=True)
class Violation:
    x: np.ndarray
    y1: float
    y2: float
    z: np.ndarray
    lhs: float
    bound: float


def _finite(values, what, points):
    bad = ~np.isfinite(values)
    if bad.any():
        k = int(np.argmax(bad))
        raise FloatingPointError(f"{what} is not finite at {points(k)}")


def probe_monotonicity(f: Callable, mu: float, box: Box, n_samples: int, seed: int,
                       d: int = 1, tol: float = VIOLATION_TOL) -> list[Violation]:
    """Search for tuples breaking ``(y1-y2)(f(x,y1,z)-f(x,y2,z)) <= -mu|y1-y2|^2``.

    An empty result means the condition was not falsified on the sample.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(*box.x, size=(n_samples, d))
    y1 = rng.uniform(*box.y, size=n_samples)
    y2 = rng.uniform(*box.y, size=n_samples)
    z = rng.uniform(*box.z, size=(n_samples, d))
    f1 = np.asarray(f(x, y1, z), dtype=float)
    f2 = np.asarray(f(x, y2, z), dtype=float)
    _finite(f1, "f", lambda k: (x[k], y1[k], z[k]))
    _finite(f2, "f", lambda k: (x[k], y2[k], z[k]))
    lhs = (y1 - y2) * (f1 - f2)
    bound = -mu * (y1 - y2) ** 2
    return [Violation(x[k], float(y1[k]), float(y2[k]), z[k], float(lhs[k]), float(bound[k]))
            for k in np.flatnonzero(lhs > bound + tol)]


def probe_lipschitz(fn: Callable, constants: Sequence[float], box: Box, n_samples: int,
                    seed: int, d: int = 1, slots: Sequence[int] | None = None,
                    scale: float = 0.1) -> dict[str, float]:
    """Worst ratio ``|Δfn|^2 / (C0|Δx|^2 + C1|Δy|^2 + C|Δz|^2)`` over random pairs.

    ``fn`` takes ``(x, y, z)``; pass ``(C0, C1)`` and a two-argument wrapper
    for ``g``.  The returned dict has the ratio for perturbations along each
    argument slot alone (``"x"``, ``"y"``, ``"z"``) and jointly (``"mixed"``).
    A ratio above 1 falsifies the claimed constants.
    """
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    consts = list(constants) + [0.0] * (3 - len(constants))
    names = ("x", "y", "z")
    slots = list(range(len(constants))) if slots is None else list(slots)
    rng = np.random.default_rng(seed)
    x = rng.uniform(*box.x, size=(n_samples, d))
    y = rng.uniform(*box.y, size=n_samples)
    z = rng.uniform(*box.z, size=(n_samples, d))
    base = np.asarray(fn(x, y, z), dtype=float)
    _finite(base, "fn", lambda k: (x[k], y[k], z[k]))

    def ratio(move):
        dx = rng.normal(0, scale, x.shape) if 0 in move else np.zeros_like(x)
        dy = rng.normal(0, scale, y.shape) if 1 in move else np.zeros_like(y)
        dz = rng.normal(0, scale, z.shape) if 2 in move else np.zeros_like(z)
        moved = np.asarray(fn(x + dx, y + dy, z + dz), dtype=float)
        _finite(moved, "fn", lambda k: (x[k] + dx[k], y[k] + dy[k], z[k] + dz[k]))
        num = np.sum(np.reshape((moved - base) ** 2, (n_samples, -1)), axis=1)
        den = (consts[0] * np.sum(dx**2, axis=1) + consts[1] * dy**2
               + consts[2] * np.sum(dz**2, axis=1))
        with np.errstate(divide="ignore", invalid="ignore"):
            r = np.where(num == 0, 0.0, num / den)
        return float(np.max(r))

    out = {names[s]: ratio((s,)) for s in slots}
    out["mixed"] = ratio(tuple(slots))
    return out
