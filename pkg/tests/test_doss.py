import math

import numpy as np
import pytest

from bdsde.catalog import build_model
from bdsde.doss import (FlowError, FlowGrid, export_flow, integrate_flow, invert_flow, mollify,
                        pde_residual, solve_flow, transform_field, transformed_driver)
from bdsde.model import AssumptionConstants, CoefficientSet, ModelSpec
from bdsde.noise import IncrementArray, TimeGrid, generate_increments

CONSTS = dict(mu=1.0, K=1.0, Kprime=1.5, p=4.0)
Y = np.linspace(-5, 5, 201)


def constant_g(c):
    return lambda x, y: np.full(np.shape(y) + (1,), c), lambda x, y: np.zeros(np.shape(y) + (1,))


def linear_g(c):
    return lambda x, y: c * np.asarray(y)[..., None], \
        lambda x, y: np.full(np.shape(y) + (1,), c)


def path(n=1000, h=1e-3, seed=0):
    return generate_increments(TimeGrid(0.0, h, n), 1, seed, 1)


def test_constant_noise_shifts_by_the_path():
    B = path()
    flow = solve_flow(*constant_g(0.5), B, [[0.0]], Y)
    b = B.path()[:, 0]
    assert np.allclose(flow.lam[:, 0, :], Y[None] - 0.5 * b[:, None], atol=1e-12)
    assert np.array_equal(flow.lam[0, 0], Y)


@pytest.mark.parametrize("scheme,tol", [("milstein", 1e-2), ("euler", 5e-2)])
def test_linear_noise_closed_form(scheme, tol):
    B = path(seed=3)
    flow = solve_flow(*linear_g(0.5), B, [[0.0]], Y, scheme=scheme)
    exact = Y[None] * np.exp(-0.5 * B.path()[:, :1])
    assert np.max(np.abs(flow.lam[:, 0] - exact) / np.maximum(np.abs(exact), 1e-12)) <= tol


def test_milstein_converges_at_first_order():
    fine = generate_increments(TimeGrid(0.0, 1.0 / 4000, 4000), 200, 0, 1)
    errs = []
    for n in (50, 100, 200):
        sq = []
        for k in range(200):
            inc = fine.data[:, k].reshape(n, -1).sum(axis=1, keepdims=True)
            B = IncrementArray(TimeGrid(0.0, 1.0 / n, n), 1, inc)
            lam = integrate_flow(*linear_g(0.5), B, np.zeros((1, 1)), np.array([1.0]))
            sq.append((lam[0] - math.exp(-0.5 * B.path()[-1, 0])) ** 2)
        errs.append(math.sqrt(np.mean(sq)))
    assert 1.4 <= errs[0] / errs[1] <= 2.6 and 1.4 <= errs[1] / errs[2] <= 2.6


def test_zero_noise_is_identity():
    flow = solve_flow(*constant_g(0.0), path(100), [[0.0], [1.0]], Y)
    assert np.all(flow.lam == Y)


def test_missing_dg_is_differenced():
    B = path(200)
    a = solve_flow(*linear_g(0.3), B, [[0.0]], Y)
    b = solve_flow(linear_g(0.3)[0], None, B, [[0.0]], Y)
    assert np.allclose(a.lam, b.lam, atol=1e-8)


def test_loss_of_monotonicity_is_an_error():
    B = IncrementArray(TimeGrid(0.0, 0.01, 1), 1, [[2.0]])
    square = (lambda x, y: np.asarray(y)[..., None] ** 2, lambda x, y: 2 * np.asarray(y)[..., None])
    with pytest.raises(FlowError, match="not increasing"):
        solve_flow(*square, B, [[0.0]], np.linspace(-1, 1, 21), scheme="euler")


def test_invalid_inputs():
    with pytest.raises(ValueError):
        solve_flow(*constant_g(1.0), path(10), [[0.0]], [1.0, 0.0])
    with pytest.raises(ValueError):
        integrate_flow(*constant_g(1.0), path(10), np.zeros((1, 1)), np.zeros(1), scheme="rk4")


def test_inverse_round_trip():
    flow = solve_flow(*linear_g(0.5), path(seed=5), [[0.0]], np.linspace(-8, 8, 401))
    t = flow.t_index(1.0)
    y = np.linspace(-5, 5, 201)
    assert np.max(np.abs(invert_flow(flow, t, 0, flow.interpolate(t, 0, y)) - y)) <= 1e-6


def test_inverse_outside_range_is_an_error():
    flow = solve_flow(*constant_g(0.0), path(10), [[0.0]], Y)
    with pytest.raises(FlowError, match="enlarge"):
        invert_flow(flow, 0, 0, 6.0)


def _model(f_y, **params):
    return build_model("custom-polynomial", {"f_y": f_y, "g_y": [0.0], "diffusion": 0.5,
                                             "kappa": 1.0, **params}, CONSTS, override=True)


def test_transformed_driver_without_noise_is_the_driver():
    model = _model([1.0, -1.0])
    flow = solve_flow(*constant_g(0.0), path(100), [[0.3]], Y)
    assert transformed_driver(flow, model, 100, [0.3], 0.7, [0.2]) == 1.0 - 0.7


def test_transformed_driver_constant_noise():
    # λ = y - cB is affine in y with unit slope, so f̃(y) = f(y - cB)
    model = _model([0.0, -1.0])
    B = path(500, seed=2)
    flow = solve_flow(*constant_g(0.4), B, [[0.0]], Y)
    shift = 0.4 * B.path()[-1, 0]
    assert transformed_driver(flow, model, 500, [0.0], 1.0, [0.0]) == \
        pytest.approx(-(1.0 - shift), abs=1e-6)


def test_transformed_driver_linear_noise():
    # λ = y e^{-cB}: f = -y gives f̃ = -y for any B
    model = _model([0.0, -1.0])
    flow = solve_flow(*linear_g(0.5), path(seed=4), [[0.0]], Y)
    for y in (-2.0, 0.5, 3.0):
        assert transformed_driver(flow, model, 1000, [0.0], y, [0.0]) == pytest.approx(-y, abs=1e-3)


class _FlatFlow(FlowGrid):
    def derivatives(self, t_index, x, y, step=1e-4):
        return {"lam": y, "dy": 0.0, "dyy": 0.0, "dx": np.zeros(1), "dxy": np.zeros(1),
                "dxx": np.zeros((1, 1))}


def test_degenerate_slope_is_an_error():
    base = solve_flow(*constant_g(0.0), path(10), [[0.0]], Y)
    flat = _FlatFlow(base.t_grid, base.x_grid, base.y_grid, base.B, base.lam, base.g, base.dg)
    with pytest.raises(FlowError, match="degenerate"):
        transformed_driver(flat, _model([0.0, -1.0]), 0, [0.0], 0.0, [0.0])


def test_transform_field_inverts_each_environment():
    t_grid, x_grid = [0.0, 0.5, 1.0], [[0.0], [1.0]]
    flows, paths = [], []
    for seed in range(3):
        B = path(seed=seed)
        flows.append(solve_flow(*linear_g(0.5), B, x_grid, np.linspace(-10, 10, 401)))
        paths.append(B.path()[[0, 500, 1000], 0])
    values = np.ones((3, 3, 2))
    out = transform_field(values, t_grid, x_grid, flows)
    exact = np.exp(0.5 * np.array(paths))[:, :, None] * values
    assert np.allclose(out, exact, rtol=1e-3)
    with pytest.raises(ValueError):
        transform_field(values, t_grid, x_grid, flows[:2])


def test_transform_field_constant_noise_adds_the_path():
    B = path(seed=7)
    flow = solve_flow(*constant_g(0.3), B, [[0.0]], np.linspace(-10, 10, 401))
    v = np.array([[[0.2], [-0.4]]])
    out = transform_field(v, [0.0, 1.0], [[0.0]], [flow])
    assert out[0, 0, 0] == pytest.approx(0.2, abs=1e-7)
    assert out[0, 1, 0] == pytest.approx(-0.4 + 0.3 * B.path()[-1, 0], abs=1e-6)


def _manufactured_model(s=0.5):
    def f(x, y, z):
        x0 = x[..., 0]
        return 1.0 + 0.5 * s**2 * np.sin(x0) + x0 * np.cos(x0)

    co = CoefficientSet(b=lambda x: -x, sigma=lambda x: np.full(x.shape[:-1] + (1, 1), s),
                        f=f, g=lambda x, y: np.zeros(np.shape(y) + (1,)))
    return ModelSpec(co, AssumptionConstants(**CONSTS), override=True)


def test_residual_vanishes_for_a_constant_zero_driver_solution():
    model = _model([0.0])
    t, x = np.linspace(0, 1, 11), np.linspace(-1, 1, 21)
    res = pde_residual(np.full((11, 21), 3.0), t, x, model)
    assert np.all(res.values == 0.0)


def test_residual_of_manufactured_solution_is_second_order():
    model = _manufactured_model()
    t = np.linspace(0, 1, 11)
    worst = []
    for n in (21, 41, 81):
        x = np.linspace(-2, 2, n)
        v = np.sin(x)[None] + t[:, None]
        worst.append(np.max(np.abs(pde_residual(v, t, x, model).values)))
    assert worst[0] < 1e-2
    assert 3.5 <= worst[0] / worst[1] <= 4.5 and 3.5 <= worst[1] / worst[2] <= 4.5


def test_residual_with_identity_flow_matches_plain_residual():
    model = _manufactured_model()
    t, x = np.linspace(0, 0.1, 11), np.linspace(-1, 1, 11)
    flow = solve_flow(*constant_g(0.0), path(100), x[:, None], Y)
    v = np.sin(x)[None] + t[:, None]
    a = pde_residual(v, t, x, model)
    b = pde_residual(v, t, x, model, flow=flow)
    assert np.allclose(a.values, b.values, atol=1e-12)


def test_residual_requires_one_dimension():
    model = build_model("ou", {"kappa": 1.0}, {**CONSTS, "d": 2, "p": 5.0})
    with pytest.raises(ValueError):
        pde_residual(np.zeros((3, 3)), [0, 1, 2], [0, 1, 2], model)


def test_mollified_path_is_smooth_and_shares_endpoints():
    B = path(1000, seed=1)
    sm = mollify(B, 10)
    assert sm.data.shape == B.data.shape
    assert np.abs(sm.data).max() < np.abs(B.data).max()
    assert np.allclose(mollify(B, 1).data, B.data, rtol=0, atol=1e-14)


def test_exports(tmp_path):
    flow = solve_flow(*constant_g(1.0), path(2), [[0.0]], [0.0, 1.0])
    export_flow(flow, tmp_path / "flow.csv")
    rows = (tmp_path / "flow.csv").read_text().splitlines()
    assert rows[0] == "t,x,y,lambda" and len(rows) == 1 + 3 * 2
    res = pde_residual(np.zeros((3, 3)), [0, 1, 2], [0, 1, 2], _model([0.0]), mollified=True)
    res.export(tmp_path / "r.csv")
    assert (tmp_path / "r.csv").read_text().splitlines()[1].endswith(",1")
