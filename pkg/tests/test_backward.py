import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bdsde.backward import (RegressionBasis, RegressionError, SolverConfig, contraction_check,
                            evaluate_solution, export_solution, regress_conditional,
                            solve_finite_horizon)
from bdsde.forward import ensemble_increments, simulate_forward
from bdsde.noise import TimeGrid, generate_increments

from conftest import poly_model


def setup(model, grid, M, x=0.3, t=0.0, seed=1):
    w = ensemble_increments(grid, M, model.d, seed, 1)
    bhat = generate_increments(grid, model.l, seed, 2)
    return simulate_forward(model, grid, t, np.array([x]), w, M), w, bhat


def test_constant_response():
    x = np.linspace(-1, 1, 50)
    fit = regress_conditional(np.full(50, 5.0), x, RegressionBasis(degree=2))
    assert fit.coef[0] == pytest.approx(5.0, abs=1e-12)
    assert np.allclose(fit.coef[1:], 0, atol=1e-12) and fit.residual_var < 1e-24


def test_linear_response_is_exact():
    x = np.random.default_rng(0).normal(size=200)
    fit = regress_conditional(x, x, RegressionBasis(degree=1))
    slope = fit.coef[1] / fit.halfwidth[0]
    intercept = fit.coef[0] - slope * fit.center[0]
    assert slope == pytest.approx(1.0, abs=1e-12)
    assert intercept == pytest.approx(0.0, abs=1e-12)
    assert fit.residual_var < 1e-24


def test_noisy_quadratic():
    rng = np.random.default_rng(3)
    x = rng.uniform(-2, 2, 10_000)
    y = x**2 + rng.normal(0, 0.1, x.size)
    fit = regress_conditional(y, x, RegressionBasis(degree=2))
    assert fit.coef[2] / fit.halfwidth[0] ** 2 == pytest.approx(1.0, abs=0.02)


def test_regression_is_deterministic():
    rng = np.random.default_rng(5)
    x, y = rng.normal(size=300), rng.normal(size=300)
    a = regress_conditional(y, x, RegressionBasis(degree=3))
    b = regress_conditional(y, x, RegressionBasis(degree=3))
    assert np.array_equal(a.coef, b.coef)


def test_rank_deficient_design_gives_min_norm_solution():
    fit = regress_conditional(np.full(20, 2.0), np.full(20, 1.5), RegressionBasis(degree=2))
    assert np.allclose(fit.coef, [2.0, 0.0, 0.0])


class _ZeroBasis(RegressionBasis):
    def features(self, u):
        return np.zeros((u.shape[0], 2))

    def size(self, d):
        return 2


def test_all_zero_design_is_an_error():
    with pytest.raises(RegressionError, match="zero"):
        regress_conditional(np.ones(10), np.arange(10.0), _ZeroBasis())


def test_bins_basis():
    x = np.linspace(-1, 1, 400)
    fit = regress_conditional((x > 0).astype(float), x, RegressionBasis("bins", bins=2))
    assert np.allclose(fit.coef, [0.0, 1.0])


def test_design_adequacy_warning():
    with pytest.warns(UserWarning, match="basis functions"):
        SolverConfig(M=20, basis=RegressionBasis(degree=2)).check_design(1)


def martingale_solution(M=10_000, seed=1):
    model = poly_model([0.0], mu=0.0, override=True)
    grid = TimeGrid(0.0, 0.01, 100)
    fw, w, bhat = setup(model, grid, M, seed=seed)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: x[:, 0],
                               SolverConfig(M=M, basis=RegressionBasis(degree=1)), w)
    return sol, fw


def test_martingale_representation():
    sol, fw = martingale_solution()
    X = fw.states[:, :, 0]
    assert np.sqrt(np.mean((sol.y_paths - X) ** 2, axis=1)).max() <= 1e-2
    assert np.sqrt(np.mean((sol.z_paths[1:-1, :, 0] - 1.0) ** 2)) <= 5e-2
    y, _ = evaluate_solution(sol, 50, np.array([[0.1]]))
    assert y[0] == pytest.approx(0.1, abs=1e-2)


def test_resolve_is_bit_identical():
    a, _ = martingale_solution(M=500)
    b, _ = martingale_solution(M=500)
    assert np.array_equal(a.coef_y, b.coef_y) and np.array_equal(a.z_paths, b.z_paths)


def test_terminal_node_evaluates_terminal_function():
    model = poly_model([0.0], mu=0.0, override=True)
    grid = TimeGrid(0.0, 0.1, 5)
    fw, w, bhat = setup(model, grid, 200)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: x[:, 0] ** 2,
                               SolverConfig(M=200, basis=RegressionBasis(degree=2)), w)
    x = np.array([[0.2], [0.5]])
    y, z = evaluate_solution(sol, sol.n, x)
    assert np.allclose(y, [0.04, 0.25], atol=1e-14)
    assert np.allclose(z[:, 0], [0.4, 1.0], atol=1e-8)


def test_extrapolation_is_clamped_and_flagged():
    sol, fw = martingale_solution(M=500)
    far = fw.states[50].max() + 10
    y, _ = evaluate_solution(sol, 50, np.array([[far]]))
    assert evaluate_solution.last_extrapolated
    y_edge, _ = evaluate_solution(sol, 50, fw.states[50].max(axis=0)[None])
    assert y[0] == y_edge[0]
    evaluate_solution(sol, 50, fw.states[50, :1])
    assert not evaluate_solution.last_extrapolated


def test_scalar_decay():
    model = poly_model([0.0, -1.0])
    grid = TimeGrid(0.0, 1e-3, 1000)
    fw, w, bhat = setup(model, grid, 50)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: np.ones(len(x)),
                               SolverConfig(M=50, basis=RegressionBasis(degree=1)), w)
    assert abs(sol.y0() - math.exp(-1.0)) <= 5e-3
    assert np.allclose(sol.z_paths, 0.0, atol=1e-12)


def test_environmental_integral_telescopes():
    g0 = 0.7
    model = poly_model([0.0], g_y=[g0], mu=0.0, override=True)
    grid = TimeGrid(0.0, 0.01, 100)
    fw, w, bhat = setup(model, grid, 20)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: np.zeros(len(x)),
                               SolverConfig(M=20, basis=RegressionBasis(degree=1)), w)
    path = bhat.path()[:, 0]
    exact = -g0 * (path[-1] - path)
    assert np.allclose(sol.y_paths, exact[:, None], atol=1e-12)
    assert sol.y0() == pytest.approx(-g0 * (path[-1] - path[0]), abs=1e-12)


def test_implicit_refinement_keeps_the_decay_benchmark():
    model = poly_model([0.0, -1.0])
    grid = TimeGrid(0.0, 1e-2, 100)
    fw, w, bhat = setup(model, grid, 20)
    cfg = SolverConfig(M=20, basis=RegressionBasis(degree=0), implicit_iterations=3)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: np.ones(len(x)), cfg, w)
    # implicit Euler limit: (1 + h)^-n
    assert sol.y0() == pytest.approx((1 + grid.h) ** -grid.n_steps, rel=1e-6)


def test_truncation_is_counted():
    model = poly_model([0.0, -1.0])
    grid = TimeGrid(0.0, 0.1, 3)
    fw, w, bhat = setup(model, grid, 20)
    cfg = SolverConfig(M=20, basis=RegressionBasis(degree=0), y_bound=0.5)
    sol = solve_finite_horizon(model, fw, bhat, lambda x: np.ones(len(x)), cfg, w)
    assert sol.truncations > 0 and sol.y0() <= 0.5


@settings(max_examples=15, deadline=None)
@given(mu1=st.floats(0.1, 3.0), gap=st.floats(0.05, 2.0))
def test_larger_margin_shrinks_y0(mu1, gap):
    grid = TimeGrid(0.0, 0.02, 50)
    out = []
    for mu in (mu1, mu1 + gap):
        model = poly_model([0.0, -mu], mu=mu, K=1.0, Kprime=1.5, override=True)
        fw, w, bhat = setup(model, grid, 10)
        sol = solve_finite_horizon(model, fw, bhat, lambda x: np.full(len(x), 2.0),
                                   SolverConfig(M=10, basis=RegressionBasis(degree=0)), w)
        out.append(abs(sol.y0()))
    assert out[1] < out[0]


def test_missing_w_is_an_error():
    model = poly_model([0.0, -1.0])
    grid = TimeGrid(0.0, 0.1, 5)
    fw, w, bhat = setup(model, grid, 10)
    with pytest.raises(ValueError):
        solve_finite_horizon(model, fw, bhat, lambda x: x[:, 0], SolverConfig(M=10))


def test_contraction_same_terminal_is_zero():
    model = poly_model([0.0, -1.0])
    grid = TimeGrid(0.0, 0.01, 100)
    fw, w, bhat = setup(model, grid, 30)
    one = lambda x: np.ones(len(x))
    chk = contraction_check(model, fw, w, bhat, one, one, 1.0,
                            SolverConfig(M=30, basis=RegressionBasis(degree=1)))
    assert np.all(chk.lhs == 0.0)


def test_contraction_closed_form():
    mu, K = 1.0, 1.0
    model = poly_model([0.0, -mu])
    grid = TimeGrid(0.0, 1e-3, 1000)
    fw, w, bhat = setup(model, grid, 30)
    chk = contraction_check(model, fw, w, bhat, lambda x: np.ones(len(x)),
                            lambda x: np.zeros(len(x)), K,
                            SolverConfig(M=30, basis=RegressionBasis(degree=1)))
    assert chk.holds
    t = chk.times
    assert np.allclose(chk.lhs, np.exp(-K * t - 2 * mu * (1 - t)), rtol=2e-3)


def test_contraction_cubic_driver():
    model = build = None
    from bdsde.catalog import build_model

    model = build_model("cubic", {"mu": 1.0, "a": 0.5, "c": 0.2, "kappa": 1.0,
                                  "diffusion": 0.5}, dict(mu=1.0, K=1.0, Kprime=1.5, p=4.0))
    grid = TimeGrid(0.0, 0.01, 100)
    fw, w, bhat = setup(model, grid, 10_000, x=0.0)
    chk = contraction_check(model, fw, w, bhat, lambda x: np.tanh(x[:, 0]) + 1.0,
                            lambda x: np.zeros(len(x)), 1.0,
                            SolverConfig(M=10_000, basis=RegressionBasis(degree=2)))
    assert chk.holds


def test_export_solution(tmp_path):
    sol, _ = martingale_solution(M=200)
    paths = export_solution(sol, tmp_path, {"seed": 1})
    rows = paths[0].read_text().splitlines()
    assert rows[0] == "node,t,quantity,basis_index,value"
    assert len(rows) == 1 + 100 * 2 * 2
