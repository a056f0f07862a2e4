import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from hybridvoco import numerics as nx
from hybridvoco.numerics import NonFiniteError, Tensor

from oracles import central_diff, gelu_ref, rel_err


# cbrt(float32 eps): balances truncation against roundoff for central differences
FD_STEP = float(np.cbrt(np.finfo(np.float32).eps))


def grad_check(build, shapes, seed, h=FD_STEP, positive=False):
    """Compare backward() against central differences of sum(build(*xs) * w)."""
    rng = np.random.default_rng(seed)
    xs = [rng.standard_normal(s) for s in shapes]
    if positive:
        xs = [np.abs(x) + 0.5 for x in xs]
    out_shape = build(*[Tensor(x) for x in xs]).shape
    w = rng.standard_normal(out_shape)

    def loss_of(arrs):
        return nx.sum(build(*arrs) * Tensor(w))

    params = [nx.parameter(x) for x in xs]
    nx.backward(loss_of(params))
    errs = []
    for k, x in enumerate(xs):
        def f(v, k=k):
            arrs = [Tensor(v if j == k else xs[j]) for j in range(len(xs))]
            return float(loss_of(arrs).data)
        errs.append(rel_err(params[k].grad, central_diff(f, x, h)))
    return max(errs)


CAUSAL4 = np.tril(np.ones((4, 4), dtype=bool))

OPS = {
    "add": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 1)]),
    "mul": (lambda a, b: a * b, [(2, 3), (2, 3)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)]),
    "gelu": (lambda a: nx.gelu(a), [(3, 5)]),
    "silu": (lambda a: nx.silu(a), [(3, 5)]),
    "transpose": (lambda a: nx.transpose(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: nx.reshape(a, (4, 3)), [(2, 6)]),
    "concat": (lambda a, b: nx.concat([a, b], axis=0), [(2, 3), (1, 3)]),
    "index": (lambda a: nx.index(a, slice(1, 3)), [(4, 3)]),
    "sum_axis": (lambda a: nx.sum(a, axis=1, keepdims=True), [(3, 4)]),
    "mean": (lambda a: nx.mean(a, axis=0), [(3, 4)]),
    "softmax": (lambda a: nx.softmax(a, axis=-1), [(3, 5)]),
    "layer_norm": (lambda a, g, b: nx.layer_norm(a, g, b), [(3, 6), (6,), (6,)]),
    "cross_entropy": (lambda a: nx.cross_entropy(a, [0, 2, 1]), [(3, 4)]),
    "linear": (lambda x, w, b: nx.linear(x, w, b), [(2, 3, 4), (4, 5), (5,)]),
    "attention": (lambda q, k, v: nx.attention(q, k, v, CAUSAL4, 0.5)[0], [(2, 4, 3), (2, 4, 3), (2, 4, 2)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_match_finite_differences(name):
    build, shapes = OPS[name]
    worst = max(grad_check(build, shapes, seed) for seed in range(20))
    assert worst < 1e-3, f"{name}: {worst}"


def test_masked_softmax_gradient():
    mask = np.array([[True, False, True, True], [True, True, False, False]])
    worst = max(grad_check(lambda a: nx.softmax(a, mask=mask), [(2, 4)], s) for s in range(20))
    assert worst < 1e-3


def test_linear_matches_matmul_plus_bias(rng):
    x, w, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5)), rng.standard_normal(5)
    got = nx.linear(Tensor(x), Tensor(w), Tensor(b)).data
    np.testing.assert_allclose(got, (nx.matmul(Tensor(x), Tensor(w)) + Tensor(b)).data, rtol=1e-6)
    with pytest.raises(ValueError):
        nx.linear(Tensor(x), Tensor(w.T))


def test_attention_matches_unfused_ops(rng):
    q, k, v = (rng.standard_normal((2, 4, 3)) for _ in range(3))
    mask = np.array([[1, 0, 0, 0], [1, 1, 0, 0], [0, 0, 1, 0], [1, 0, 1, 1]], dtype=bool)
    out, probs = nx.attention(Tensor(q), Tensor(k), Tensor(v), mask, 0.5)
    s = nx.softmax(nx.matmul(Tensor(q), nx.transpose(Tensor(k))) * 0.5, mask=mask)
    np.testing.assert_allclose(probs, s.data, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(out.data, (s @ Tensor(v)).data, rtol=1e-5, atol=1e-6)
    assert np.all(probs[..., ~mask] == 0.0) and out.blocked_rows == 0


def test_attention_counts_fully_blocked_rows(rng):
    q = Tensor(rng.standard_normal((1, 3, 2)))
    mask = np.array([[1, 0, 0], [0, 0, 0], [1, 1, 1]], dtype=bool)
    out, probs = nx.attention(q, q, q, mask)
    assert out.blocked_rows == 1
    assert np.all(probs[0, 1] == 0) and np.all(np.isfinite(out.data))


def test_embedding_gradient():
    ids = np.array([[0, 2, 2], [1, 0, 3]])
    worst = max(grad_check(lambda w: nx.embedding(w, ids), [(4, 3)], s) for s in range(20))
    assert worst < 1e-3


def test_mlp_gradient():
    def mlp(x, w1, w2):
        return nx.gelu(x @ w1) @ w2
    worst = max(grad_check(mlp, [(4, 3), (3, 5), (5, 2)], s) for s in range(20))
    assert worst < 1e-3


def test_matmul_examples():
    m = np.array([[2.0, -1.0], [0.5, 3.0]])
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ Tensor(m)).data, m)
    out = Tensor([[1, 2], [3, 4]]) @ Tensor([[5], [6]])
    np.testing.assert_array_equal(out.data, [[17], [39]])


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 3)))


@given(st.integers(0, 10_000))
def test_matmul_associative_on_small_integers(seed):
    rng = np.random.default_rng(seed)
    a, b, c = (Tensor(rng.integers(-4, 5, s)) for s in ((2, 3), (3, 4), (4, 2)))
    np.testing.assert_array_equal(((a @ b) @ c).data, (a @ (b @ c)).data)


def test_softmax_examples():
    np.testing.assert_allclose(nx.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, rtol=1e-6)
    np.testing.assert_array_equal(nx.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])
    np.testing.assert_array_equal(nx.softmax(Tensor([0.0, -np.inf])).data, [1.0, 0.0])


def test_softmax_blocked_row_flags_instead_of_nan():
    out = nx.softmax(Tensor(np.zeros((2, 3))), mask=np.array([[True, False, False], [False, False, False]]))
    np.testing.assert_array_equal(out.data, [[1, 0, 0], [0, 0, 0]])
    assert out.blocked_rows == 1


@given(arrays(np.float32, (3, 6), elements=st.floats(-30, 30, width=32)),
       arrays(bool, (3, 6)))
def test_softmax_rows_are_distributions(x, mask):
    mask[:, 0] = True
    s = nx.softmax(Tensor(x), mask=mask).data
    assert (s >= 0).all()
    assert (s[~mask] == 0).all()
    np.testing.assert_allclose(s.sum(-1), 1.0, atol=1e-6)


def test_gelu_examples():
    assert nx.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(nx.gelu(Tensor([3.0])).data[0] - gelu_ref(3.0)) < 1e-6
    assert abs(gelu_ref(3.0) - 2.9960) < 1e-4


@given(st.floats(-6, 6))
def test_gelu_matches_erf_definition(x):
    assert abs(float(nx.gelu(Tensor([x])).data[0]) - gelu_ref(np.float32(x))) < 1e-5


def test_cross_entropy_examples():
    assert abs(nx.cross_entropy(Tensor([0.0, 0.0]), 0).item() - math.log(2)) < 1e-7
    with pytest.raises(IndexError):
        nx.cross_entropy(Tensor([[0.0, 1.0]]), [2])


def test_layer_norm_normalises():
    x = np.random.default_rng(1).standard_normal((5, 8)) * 3 + 2
    y = nx.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8))).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-5)
    np.testing.assert_allclose(y.std(-1), 1, atol=1e-3)


def test_backward_examples():
    x = nx.parameter(np.random.default_rng(0).standard_normal((2, 3, 4)))
    nx.backward(nx.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))
    y = nx.parameter(3.0)
    nx.backward(y * y)
    assert y.grad == 6.0


def test_backward_returns_map_for_every_node():
    a, b = nx.parameter([1.0, 2.0]), nx.parameter([3.0, 4.0])
    c = a * b
    loss = nx.sum(c)
    grads = nx.backward(loss)
    assert set(grads) == {a.node_id, b.node_id, c.node_id, loss.node_id}
    np.testing.assert_array_equal(grads[c.node_id].data, [1.0, 1.0])
    np.testing.assert_array_equal(grads[a.node_id].data, [3.0, 4.0])


def test_tape_is_topological_and_unique():
    a = nx.parameter([1.0, 2.0])
    b = nx.gelu(a)
    c = b * b + a
    loss = nx.sum(c)
    tape = nx.Tape(loss)
    ids = [n.node_id for n in tape.nodes]
    assert len(ids) == len(set(ids))
    pos = {n: i for i, n in enumerate(ids)}
    for n in tape.nodes:
        for p in n.parents:
            if p.requires_grad:
                assert pos[p.node_id] < pos[n.node_id]


def test_backward_is_bitwise_deterministic():
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((4, 6)), rng.standard_normal((6, 3))

    def run():
        a, b = nx.parameter(x), nx.parameter(w)
        nx.backward(nx.cross_entropy(nx.gelu(a @ b), [0, 1, 2, 0]))
        return a.grad.tobytes(), b.grad.tobytes()

    assert run() == run()


def test_backward_rejects_non_scalar_and_constant():
    with pytest.raises(ValueError):
        nx.backward(nx.parameter([1.0, 2.0]) * 2.0)
    with pytest.raises(ValueError):
        nx.backward(Tensor(1.0))


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([1.0, np.nan])
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])
    with pytest.raises(NonFiniteError):
        Tensor([1e30]) * Tensor([1e30])


def test_no_grad_records_nothing():
    a = nx.parameter([1.0])
    with nx.no_grad():
        b = a * 2.0
    assert not b.requires_grad and b.parents == ()
