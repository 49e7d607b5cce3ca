"""Built-in coefficient families selectable by name.

``linear``            f = a - μy,          g = g0 (constant)
``ou``                f = -μy,             g = g0 (constant)
``cubic``             f = -y^3 - μy + a,   g = c·y
``custom-polynomial`` f = Σ f_y[k] y^k + <f_x, x> + <f_z, z>,  g = Σ g_y[k] y^k

All families share the forward dynamics ``b(x) = drift_matrix @ x + drift_shift``
and constant ``σ = diffusion`` (a scalar multiple of the identity or a full
matrix).
"""
from __future__ import annotations

from typing import Any, Mapping

import numpy as np

from .model import AssumptionConstants, CoefficientSet, ModelSpec

CATALOG = ("linear", "ou", "cubic", "custom-polynomial")


def _forward(params: Mapping[str, Any], d: int):
    A = np.asarray(params.get("drift_matrix", -float(params.get("kappa", 0.0))), dtype=float)
    A = A * np.eye(d) if A.ndim == 0 else A.reshape(d, d)
    shift = np.broadcast_to(np.asarray(params.get("drift_shift", 0.0), dtype=float), (d,))
    S = np.asarray(params.get("diffusion", 1.0), dtype=float)
    S = S * np.eye(d) if S.ndim == 0 else S.reshape(d, d)

    def b(x):
        return x @ A.T + shift

    def sigma(x):
        return np.broadcast_to(S, x.shape[:-1] + (d, d))

    return b, sigma


def _poly(coeffs):
    c = np.asarray(coeffs, dtype=float)

    def value(y):
        return np.polynomial.polynomial.polyval(y, c)

    def slope(y):
        return np.polynomial.polynomial.polyval(y, np.polynomial.polynomial.polyder(c))

    return value, slope


def coefficients(name: str, params: Mapping[str, Any] | None = None, d: int = 1,
                 l: int = 1) -> CoefficientSet:
    params = dict(params or {})
    if name not in CATALOG:
        raise KeyError(f"unknown model {name!r}; choose from {CATALOG}")
    b, sigma = _forward(params, d)
    mu = float(params.get("mu", 1.0))
    a = float(params.get("a", 0.0))
    g0 = np.broadcast_to(np.asarray(params.get("g0", 0.0), dtype=float), (l,)).copy()

    if name in ("linear", "ou"):
        shift = a if name == "linear" else 0.0

        def f(x, y, z):
            return shift - mu * y

        def g(x, y):
            return np.broadcast_to(g0, np.shape(y) + (l,))

        def dg(x, y):
            return np.zeros(np.shape(y) + (l,))

    elif name == "cubic":
        c = np.broadcast_to(np.asarray(params.get("c", 0.0), dtype=float), (l,)).copy()

        def f(x, y, z):
            return a - y**3 - mu * y

        def g(x, y):
            return np.asarray(y)[..., None] * c

        def dg(x, y):
            return np.broadcast_to(c, np.shape(y) + (l,))

    else:
        fy, _ = _poly(params.get("f_y", [0.0, -mu]))
        fx = np.broadcast_to(np.asarray(params.get("f_x", 0.0), dtype=float), (d,))
        fz = np.broadcast_to(np.asarray(params.get("f_z", 0.0), dtype=float), (d,))
        gy, gslope = _poly(params.get("g_y", [0.0]))

        def f(x, y, z):
            return fy(y) + x @ fx + z @ fz

        def g(x, y):
            return np.broadcast_to(gy(np.asarray(y))[..., None], np.shape(y) + (l,))

        def dg(x, y):
            return np.broadcast_to(gslope(np.asarray(y))[..., None], np.shape(y) + (l,))

    return CoefficientSet(b, sigma, f, g, dg, d=d, l=l, name=name)


def build_model(name: str, params: Mapping[str, Any] | None, constants: Mapping[str, Any],
                override: bool = False) -> ModelSpec:
    consts = AssumptionConstants(**constants)
    co = coefficients(name, params, d=consts.d, l=consts.l)
    return ModelSpec(co, consts, override=override)
