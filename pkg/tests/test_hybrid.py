import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridvoco import numerics as nx
from hybridvoco.hybrid import (FUSIONS, AttentionMask, TOPOLOGIES, LayoutError, LayoutSpec, assemble, build_mask,
                               mask_csv, mask_to_additive, reachability)
from hybridvoco.numerics import Tensor

from oracles import brute_force_allow

FIVE_TOKEN_PAIRS = {(0, 0), (1, 1), (2, 2), (3, 0), (3, 1), (3, 2), (3, 3), (4, 3), (4, 4)}


def all_layouts():
    for n_d, n_v, n_b, n_w in itertools.product(range(9), range(9), range(1, 3), range(5)):
        yield LayoutSpec(n_d, n_v, n_b, n_w)


def test_build_mask_equals_brute_force_everywhere():
    for layout in all_layouts():
        for topo in TOPOLOGIES:
            np.testing.assert_array_equal(build_mask(layout, topo).allow, brute_force_allow(layout, topo),
                                          err_msg=f"{layout} {topo}")


def test_five_token_example():
    m = build_mask(LayoutSpec(1, 2, 1, 1))
    got = {(i, j) for i, j in zip(*np.nonzero(m.allow))}
    assert got == FIVE_TOKEN_PAIRS
    add = mask_to_additive(m).data
    for i, j in itertools.product(range(5), repeat=2):
        assert add[i, j] == (0.0 if (i, j) in FIVE_TOKEN_PAIRS else -np.inf)
    assert mask_csv(m).splitlines()[3] == "1,1,1,1,0"


def test_no_visual_tokens_is_plain_causal():
    m = build_mask(LayoutSpec(0, 0, 2, 3))
    np.testing.assert_array_equal(m.allow, np.tril(np.ones((5, 5), bool)))


def test_additive_all_allow_and_round_trip():
    full = AttentionMask(np.ones((2, 2), bool), LayoutSpec(0, 0, 1, 1))
    np.testing.assert_array_equal(mask_to_additive(full).data, np.zeros((2, 2)))
    m = build_mask(LayoutSpec(3, 4, 2, 2))
    np.testing.assert_array_equal(mask_to_additive(m).data < -1e30, ~m.allow)


@given(st.integers(0, 8), st.integers(0, 8), st.integers(1, 3), st.integers(0, 4), st.sampled_from(FUSIONS))
def test_mask_invariants(n_d, n_v, n_b, n_w, fusion):
    if fusion == "mean" and n_v == 0 and n_d > 0:
        return
    lay = LayoutSpec(n_d, n_v, n_b, n_w, fusion)
    a = build_mask(lay).allow
    vis = np.arange(lay.n_visual)
    voco, text = lay.voco_positions(), lay.text_positions()
    assert a.shape == (lay.total, lay.total)
    assert not np.triu(a, 1).any()
    assert a.diagonal().all()
    np.testing.assert_array_equal(a[np.ix_(vis, vis)], np.eye(len(vis), dtype=bool))
    assert not a[np.ix_(text, vis)].any()
    assert a[np.ix_(text, voco)].all()
    for k, i in enumerate(voco):
        assert a[i, vis].all() and a[i, voco[:k + 1]].all()
    assert not a.flags.writeable


def test_reachability_examples():
    m = build_mask(LayoutSpec(1, 2, 1, 1))
    one = reachability(m, 1)
    assert not one[:3, 4].any()  # depth 1: visual never reaches text
    two = reachability(m, 2)
    assert two[:3, 4].all()  # depth 2: through voco
    cut = reachability(m, 6, relay_blocked=[3])
    assert not cut[:3, 4].any()


@given(st.integers(1, 6), st.integers(0, 6), st.integers(1, 2), st.integers(1, 3), st.integers(1, 4))
def test_bottleneck_property(n_d, n_v, n_b, n_w, depth):
    lay = LayoutSpec(n_d, n_v, n_b, n_w)
    m = build_mask(lay)
    cut = reachability(m, depth, relay_blocked=list(lay.voco_positions()))
    assert not cut[np.ix_(np.arange(lay.n_visual), lay.text_positions())].any()


def test_layout_errors():
    with pytest.raises(LayoutError):
        LayoutSpec(1, 1, 0, 1)
    with pytest.raises(LayoutError):
        LayoutSpec(1, 1, 1, 1, fusion="sum")
    with pytest.raises(LayoutError):
        build_mask(LayoutSpec(1, 1), "dense")


def test_paper_scale_layout():
    lay = LayoutSpec(4, 576, 1, 0)
    assert lay.total == 581 and lay.n_visual == 580


def _toks(n, d, fill):
    return Tensor(np.full((n, d), fill, dtype=np.float32))


def test_assemble_orders():
    v_d, V = Tensor(np.arange(8.0).reshape(2, 4)), _toks(3, 4, 10.0)
    voco, W = _toks(1, 4, 20.0), _toks(2, 4, 30.0)
    pre = assemble(v_d, V, voco, W, "pre").data
    assert pre.shape == (8, 4)
    assert pre[0].tobytes() == v_d.data[0].tobytes()
    post = assemble(v_d, V, voco, W, "post").data
    np.testing.assert_array_equal(post[3:5], v_d.data)
    mean = assemble(v_d, V, voco, W, "mean").data
    assert mean.shape == (6, 4)
    np.testing.assert_allclose(mean[0], 10.0 + v_d.data.mean(0))
    no_anchor = assemble(None, V, voco, W).data
    np.testing.assert_array_equal(no_anchor, np.concatenate([V.data, voco.data, W.data]))


def test_assemble_width_mismatch():
    with pytest.raises(LayoutError):
        assemble(_toks(1, 4, 0), _toks(2, 3, 0), _toks(1, 4, 0), _toks(1, 4, 0))


def test_assemble_batched_gradient_flows_to_every_part():
    parts = [nx.parameter(np.ones((2, n, 4))) for n in (1, 2, 1, 1)]
    nx.backward(nx.sum(assemble(*parts)))
    for p in parts:
        np.testing.assert_array_equal(p.grad, np.ones_like(p.data))
