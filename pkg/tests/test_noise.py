import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import stats

from bdsde.noise import (IncrementArray, TimeGrid, coarsen, dump_csv, generate_increments,
                         load_csv, reverse_path, reversed_environment, shift_increments,
                         standard_normals)


def test_grid_nodes_and_length():
    g = TimeGrid(0.0, 0.01, 100)
    assert np.all(np.diff(g.nodes) > 0)
    assert math.isclose(g.h * g.n_steps, 1.0, rel_tol=0, abs_tol=np.spacing(1.0))
    assert g.index_of(0.37) == 37
    with pytest.raises(ValueError):
        TimeGrid(0.0, -0.1, 3)


def test_generation_is_deterministic():
    g = TimeGrid(0.0, 0.01, 50)
    a = generate_increments(g, 3, 7, 1)
    b = generate_increments(g, 3, 7, 1)
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, generate_increments(g, 3, 8, 1).data)


def test_mean_over_many_streams():
    # 10^4 streams of 100 steps: 10^6 increments in total
    h = 0.01
    draws = np.concatenate([generate_increments(TimeGrid(0.0, h, 100), 1, s, 0).data[:, 0]
                            for s in range(10_000)])
    se = math.sqrt(h / draws.size)
    assert abs(draws.mean()) < 4 * se


def test_variance_matches_step():
    h = 0.01
    draws = np.concatenate([generate_increments(TimeGrid(0.0, h, 100), 1, s, 3).data[:, 0]
                            for s in range(1000)])
    assert abs(draws.var() / h - 1.0) < 0.02


def test_reverse_small_example():
    g = TimeGrid(0.0, 1.0, 3)
    arr = IncrementArray(g, 1, np.array([[1.0], [2.0], [3.0]]), 0, 0)
    assert reverse_path(arr, 3.0).data[:, 0].tolist() == [-3.0, -2.0, -1.0]


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), n=st.integers(1, 60), dim=st.integers(1, 3))
def test_reverse_is_an_involution(seed, n, dim):
    g = TimeGrid(0.0, 0.1, n)
    b = generate_increments(g, dim, seed, 1)
    back = reverse_path(reverse_path(b, g.t1), g.t1)
    assert np.array_equal(back.data, b.data)


def test_reversed_path_telescopes():
    g = TimeGrid(0.0, 0.01, 200)
    b = generate_increments(g, 2, 4, 1)
    bh = reverse_path(b, g.t1)
    path_b, path_bh = b.path(), bh.path()
    assert np.array_equal(path_bh[0], np.zeros(2))
    assert np.allclose(path_bh[-1], path_b[0] - path_b[-1], atol=1e-12)


def test_reverse_rejects_wrong_horizon():
    b = generate_increments(TimeGrid(0.0, 0.1, 10), 1, 0, 0)
    with pytest.raises(ValueError):
        reverse_path(b, 2.0)


def test_reversed_environment_matches_reverse_path():
    h, T_steps = 0.01, 150
    b = generate_increments(TimeGrid(0.0, h, T_steps), 1, 9, 1)
    direct = reverse_path(b, T_steps * h)
    env = reversed_environment(9, 1, T_steps, 300, h, 1)
    assert np.array_equal(env.data[:T_steps], direct.data)
    # past T the reversal reads the negative-time half of the same stream
    neg = standard_normals(9, 1, -150, 150, 1)[::-1] * math.sqrt(h)
    assert np.array_equal(env.data[T_steps:], -neg)


def test_shift_zero_is_identity():
    b = generate_increments(TimeGrid(0.0, 0.1, 20), 2, 1, 1)
    assert shift_increments(b, 0) is b


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32), r=st.integers(0, 40), s=st.integers(0, 40),
       reverse=st.booleans())
def test_shift_semigroup(seed, r, s, reverse):
    g = TimeGrid(0.0, 0.05, 40)
    b = generate_increments(g, 2, seed, 1)
    if reverse:
        b = reverse_path(b, g.t1)
    two = shift_increments(shift_increments(b, r), s)
    one = shift_increments(b, r + s)
    assert np.array_equal(two.data, one.data)
    assert two.grid == g


def test_shift_entries_come_from_the_extended_stream():
    g = TimeGrid(0.0, 0.1, 10)
    b = generate_increments(g, 1, 5, 2)
    longer = generate_increments(TimeGrid(0.0, 0.1, 25), 1, 5, 2)
    assert np.array_equal(shift_increments(b, 15).data, longer.data[15:25])


def test_negative_shift_is_rejected():
    b = generate_increments(TimeGrid(0.0, 0.1, 10), 1, 5, 2)
    with pytest.raises(ValueError):
        shift_increments(b, -1)


def test_shift_preserves_marginal_law():
    h, i = 0.01, 3
    g = TimeGrid(0.0, h, 5)
    vals = np.array([shift_increments(generate_increments(g, 1, s, 1), 7).data[i, 0]
                     for s in range(10_000)])
    assert stats.kstest(vals / math.sqrt(h), "norm").pvalue >= 0.01
    base = np.array([generate_increments(g, 1, s, 1).data[i, 0] for s in range(10_000)])
    assert abs(vals.mean() - base.mean()) < 4 * math.sqrt(2 * h / 10_000)


def test_streams_do_not_share_counters():
    g = TimeGrid(0.0, 0.01, 5000)
    w = generate_increments(g, 1, 3, 1).data[:, 0]
    b = generate_increments(g, 1, 3, 2).data[:, 0]
    assert not np.any(w == b)
    assert abs(np.corrcoef(w, b)[0, 1]) < 4 / math.sqrt(g.n_steps)


def test_csv_round_trip(tmp_path):
    b = generate_increments(TimeGrid(0.5, 0.01, 30), 2, 11, 4, first_index=-7)
    dump_csv(b, tmp_path / "b.csv")
    header = (tmp_path / "b.csv").read_text().splitlines()[0]
    assert "seed=11" in header and "stream=4" in header and "n_steps=30" in header
    back = load_csv(tmp_path / "b.csv")
    assert np.array_equal(back.data, b.data)
    assert back.grid == b.grid and back.first_index == -7


def test_coarsen_sums_blocks():
    b = generate_increments(TimeGrid(0.0, 0.01, 40), 1, 1, 1)
    c = coarsen(b, 4)
    assert c.n_steps == 10 and math.isclose(c.grid.h, 0.04)
    assert np.allclose(c.path()[:, 0], b.path()[::4, 0], atol=1e-14)
