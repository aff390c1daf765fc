import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings, strategies as st
from numpy.testing import assert_allclose

from anchoral.context import ContextMatrix, load_context, rwr_step, save_context, structural_context
from anchoral.graph import SocialGraph, build_transition

from oracles import dense_context


def test_matches_dense_oracle_small():
    edges = [(0, 1), (1, 2), (2, 0), (3, 4)]
    g = SocialGraph.from_edges(6, edges)
    ctx = structural_context(g, restart=0.6, steps=5)
    assert_allclose(ctx.rows, dense_context(6, edges, 0.6, 5), atol=1e-12)
    assert ctx.steps == 5 and ctx.restart == 0.6


def test_single_step_is_restart_plus_one_hop():
    g = SocialGraph.from_edges(3, [(0, 1), (1, 2)])
    ctx = structural_context(g, restart=0.6, steps=1).rows
    assert_allclose(ctx[1], [0.2, 0.6, 0.2])


def test_isolated_node_keeps_all_mass():
    g = SocialGraph.from_edges(3, [(0, 1)])
    rows = structural_context(g, 0.3, 4).rows
    assert_allclose(rows[2], [0, 0, 4.0])


def test_rwr_step_and_errors():
    g = SocialGraph.from_edges(3, [(0, 1), (1, 2)])
    D = build_transition(g)
    p = rwr_step(np.array([1.0, 0, 0]), D, 0.5, 0)
    assert_allclose(p, [0.5, 0.5, 0])
    with pytest.raises(ValueError):
        rwr_step(np.ones(4), D, 0.5, 0)


def test_blocking_and_workers_do_not_change_result():
    rng = np.random.default_rng(0)
    edges = [tuple(e) for e in rng.integers(0, 30, size=(60, 2))]
    g = SocialGraph.from_edges(30, edges)
    a = structural_context(g, block=7, workers=1).rows
    b = structural_context(g, block=4, workers=3).rows
    assert_allclose(a, b, atol=0, rtol=0)


def test_save_load_roundtrip(tmp_path):
    g = SocialGraph.from_edges(5, [(0, 1), (3, 4)])
    ctx = structural_context(g, 0.6, 3)
    save_context(ctx, tmp_path / "c.bin")
    back = load_context(tmp_path / "c.bin")
    assert isinstance(back, ContextMatrix)
    assert back.steps == 3 and back.restart == 0.6
    assert np.array_equal(back.rows, ctx.rows)


def test_load_rejects_garbage(tmp_path):
    (tmp_path / "x.bin").write_bytes(b"not a context file at all")
    with pytest.raises(ValueError):
        load_context(tmp_path / "x.bin")


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 30), m=st.integers(0, 60), c=st.floats(0.05, 0.95),
       S=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_rows_sum_to_steps(n, m, c, S, seed):
    rng = np.random.default_rng(seed)
    edges = [tuple(e) for e in rng.integers(0, n, size=(m, 2))]
    rows = structural_context(SocialGraph.from_edges(n, edges), c, S).rows
    assert_allclose(rows.sum(axis=1), S, atol=1e-9)
    assert (rows >= 0).all()
