import numpy as np
import pytest
from hypothesis import given, strategies as st

from hybridvoco import synthdata as sd
from hybridvoco.synthdata import SceneSpec, Vocab, answer_for, d_bin, image_hash, make_dataset, render


def test_render_deterministic():
    s = SceneSpec(3, 0.42, 7)
    assert render(s).tobytes() == render(s).tobytes()
    assert render(s).shape == (32, 32, 1) and render(s).dtype == np.float32


@given(st.integers(0, 7), st.integers(0, 7), st.integers(0, 2**40))
def test_shape_change_is_confined_to_shape_support(a, b, seed):
    if a == b:
        return
    x, y = render(SceneSpec(a, 0.3, seed)), render(SceneSpec(b, 0.3, seed))
    diff = np.abs(x - y)[:, :, 0] > 1e-6
    assert diff.any()
    # every differing pixel differs by exactly one shape level
    np.testing.assert_allclose(np.abs(x - y)[:, :, 0][diff], sd.SHAPE_LEVEL, atol=1e-5)


def test_detail_varies_continuously():
    imgs = [render(SceneSpec(2, d, 11)) for d in np.arange(0, 0.99, 0.01)]
    steps = [np.abs(b - a).max() for a, b in zip(imgs, imgs[1:])]
    assert max(steps) < 0.2


def test_render_rejects_out_of_range():
    with pytest.raises(ValueError):
        render(SceneSpec(8, 0.1, 0))
    with pytest.raises(ValueError):
        render(SceneSpec(0, 1.0, 0))


def test_balanced_classes():
    tr, _ = make_dataset(800, 0, seed=2)
    assert np.bincount(tr.s_class, minlength=8).tolist() == [100] * 8
    assert tr.task.sum() == 400


def test_factor_independence():
    tr, _ = make_dataset(10_000, 0, seed=5)
    assert abs(np.corrcoef(tr.s_class, tr.d_value)[0, 1]) < 0.05


def test_train_test_disjoint():
    tr, te = make_dataset(1000, 500, seed=0)
    assert not {image_hash(i) for i in tr.images} & {image_hash(i) for i in te.images}


def test_answers_rederive_from_spec():
    tr, _ = make_dataset(200, 0, seed=4)
    for i in range(len(tr)):
        s = tr.sample(i)
        assert answer_for(s.spec, s.task, tr.n_S, tr.n_D) == s.answer
        assert np.array_equal(render(s.spec, tr.n_S), s.image)


def test_vocab_layout():
    v = Vocab(8, 8)
    assert v.size == 20
    assert len({v.task_s, v.task_d, v.ask, v.eos}) == 4 and min(v.task_s, v.task_d, v.ask, v.eos) == 16
    assert v.d_token(0) == 8 and v.s_token(7) == 7
    assert d_bin(0.999, 8) == 7 and d_bin(0.0, 8) == 0


def test_dataset_deterministic_and_seeded():
    a, _ = make_dataset(64, 0, seed=1)
    b, _ = make_dataset(64, 0, seed=1)
    c, _ = make_dataset(64, 0, seed=2)
    assert a.images.tobytes() == b.images.tobytes()
    assert a.images.tobytes() != c.images.tobytes()


def test_too_many_classes():
    with pytest.raises(ValueError):
        make_dataset(10, 10, n_S=17)


def _softmax_regression(x, y, xt, iters=300, lr=0.5):
    mu, sd_ = x.mean(0), x.std(0) + 1e-6
    x, xt = (x - mu) / sd_, (xt - mu) / sd_
    k = int(y.max()) + 1
    W, b, Y = np.zeros((x.shape[1], k)), np.zeros(k), np.eye(k)[y]
    for _ in range(iters):
        z = x @ W + b
        p = np.exp(z - z.max(1, keepdims=True))
        p /= p.sum(1, keepdims=True)
        g = (p - Y) / len(y)
        W -= lr * (x.T @ g + 1e-3 * W)
        b -= lr * g.sum(0)
    return (xt @ W + b).argmax(1)


def test_dataset_is_solvable_without_a_bottleneck():
    tr, te = make_dataset(2048, 512, seed=1)
    x, xt = tr.images.reshape(len(tr), -1).astype(np.float64), te.images.reshape(len(te), -1).astype(np.float64)
    s_acc = (_softmax_regression(x, tr.s_class, xt) == te.s_class).mean()
    dtr = np.array([d_bin(v, 8) for v in tr.d_value])
    dte = np.array([d_bin(v, 8) for v in te.d_value])
    d_acc = (_softmax_regression(x, dtr, xt) == dte).mean()
    assert s_acc > 0.95 and d_acc > 0.95, (s_acc, d_acc)


def test_stats():
    tr, _ = make_dataset(160, 0, seed=0)
    st_ = sd.stats(tr)
    assert st_["n"] == 160 and st_["class_counts"] == [20] * 8 and st_["task_D_fraction"] == 0.5
