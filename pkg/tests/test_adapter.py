from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from regnn.adapter import (AdapterParams, PreparedSplit, attention_batch, averaging_predict, cls_loss,
                           cls_predict, compute_attention, predict_split, reg_loss, reg_predict,
                           retrieve_batch, retrieve_with_dropout, train_adapter)
from regnn.autodiff import Tensor, grad_check
from regnn.graph import Task
from regnn.index import build


def zero_params(d=2, k=2):
    p = AdapterParams.init(d, k, seed=0)
    p.W1.value[:] = 0
    p.W2.value[:] = 0
    return p


def retrieval(rng, k=2, d=2):
    return SimpleNamespace(embeddings=rng.normal(size=(k, d)))


def test_zero_projections_give_uniform_attention():
    attn = compute_attention(zero_params(), np.array([1.0, 2.0]), retrieval(np.random.default_rng(0)))
    np.testing.assert_allclose(attn.value, [1 / 3] * 3)


def test_phi_bias_shifts_attention():
    p = zero_params()
    p.phi.value[:] = [np.log(2), 0, 0]
    attn = compute_attention(p, np.array([1.0, 2.0]), retrieval(np.random.default_rng(0)))
    np.testing.assert_allclose(attn.value, [0.5, 0.25, 0.25], rtol=1e-12)


def test_attention_matches_formula():
    rng = np.random.default_rng(1)
    p = AdapterParams.init(4, 3, d_proj=5, seed=2)
    p.phi.value[:] = rng.normal(size=4)
    h_x, r = rng.normal(size=4), rng.normal(size=(3, 4))
    q = p.W1.value @ h_x
    scores = [q @ (p.W2.value @ h) / np.sqrt(5) + p.phi.value[i] for i, h in enumerate([h_x, *r])]
    oracle = np.exp(scores) / np.sum(np.exp(scores))
    attn = compute_attention(p, h_x, SimpleNamespace(embeddings=r))
    np.testing.assert_allclose(attn.value, oracle, rtol=1e-12)


def test_attention_shape_checks():
    p = zero_params(d=2, k=2)
    with pytest.raises(ValueError, match="expects k"):
        attention_batch(p, np.zeros((1, 2)), np.zeros((1, 3, 2)))
    with pytest.raises(ValueError, match="retrieved embeddings"):
        attention_batch(p, np.zeros((1, 2)), np.zeros((1, 2, 3)))


@pytest.mark.parametrize("attn, l_x, labels, c, expected", [
    ([1.0, 0.0, 0.0], [1.0, 0.0], [1, 1], 0, 0.0),
    ([0.0, 0.5, 0.5], [1.0, 0.0], [1, 1], 1, 0.0),
    ([0.5, 0.25, 0.25], [0.6, 0.4], [1, 0], 1, -np.log(0.45)),
])
def test_cls_loss_cases(attn, l_x, labels, c, expected):
    assert cls_loss(attn, l_x, labels, c).item() == pytest.approx(expected, abs=1e-12)


def test_cls_loss_floor_keeps_it_finite():
    assert cls_loss([1.0, 0.0], [1.0, 0.0], [0], 1).item() == pytest.approx(-np.log(1e-12))


@pytest.mark.parametrize("attn, l_x, values, c, expected", [
    ([1.0, 0.0, 0.0], 3.0, [0.0, 0.0], 3.0, 0.0),
    ([0.0, 0.5, 0.5], 0.0, [2.0, 4.0], 3.0, 0.0),
    ([1.0, 0.0, 0.0], 1.0, [5.0, 5.0], 3.0, 4.0),
])
def test_reg_loss_cases(attn, l_x, values, c, expected):
    assert reg_loss(attn, l_x, values, c).item() == pytest.approx(expected, abs=1e-12)


def test_predict_cases():
    dist, cls = cls_predict([0.2, 0.4, 0.4], [0.9, 0.1], [1, 1])
    np.testing.assert_allclose(dist, [0.18, 0.82])
    assert cls == 1
    assert reg_predict([0.5, 0.25, 0.25], 2.0, [4.0, 8.0]) == pytest.approx(4.0)


def test_averaging_predict():
    dist, cls = averaging_predict([1.0, 0.0], [1, 1], Task("binary"))
    np.testing.assert_allclose(dist, [1 / 3, 2 / 3])
    assert cls == 1
    assert averaging_predict(3.0, [6.0, 0.0], Task("regression")) == pytest.approx(3.0)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(0.01, 1)), st.lists(st.integers(0, 2), min_size=3, max_size=3),
       arrays(np.float64, 3, elements=st.floats(0.01, 1)))
def test_adjusted_distribution_normalised(raw_attn, labels, raw_lx):
    attn, l_x = raw_attn / raw_attn.sum(), raw_lx / raw_lx.sum()
    dist, cls = cls_predict(attn, l_x, labels)
    assert dist.sum() == pytest.approx(1.0, abs=1e-12)
    assert cls_loss(attn, l_x, labels, cls).item() == pytest.approx(-np.log(dist.max()), abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(-20, 20))
def test_constant_phi_shift_invariant(shift):
    rng = np.random.default_rng(3)
    p = AdapterParams.init(3, 2, seed=4)
    h_x, r = rng.normal(size=3), SimpleNamespace(embeddings=rng.normal(size=(2, 3)))
    before = compute_attention(p, h_x, r).value
    p.phi.value += shift
    np.testing.assert_allclose(compute_attention(p, h_x, r).value, before, rtol=1e-9, atol=1e-12)


@pytest.mark.parametrize("task", [Task("multiclass", 3), Task("regression")])
def test_adapter_gradients(task):
    from regnn.adapter import cls_loss_batch, reg_loss_batch
    rng = np.random.default_rng(5)
    B, k, d = 4, 3, 5
    h_x, r_emb = rng.normal(size=(B, d)), rng.normal(size=(B, k, d))
    if task.is_classification:
        base = rng.dirichlet(np.ones(3), size=B)
        r_labels, targets = rng.integers(0, 3, size=(B, k)), rng.integers(0, 3, size=B)
        loss_fn = cls_loss_batch
    else:
        base = rng.normal(size=B)
        r_labels, targets = rng.normal(size=(B, k)), rng.normal(size=B)
        loss_fn = reg_loss_batch
    p = AdapterParams.init(d, k, seed=6)
    p.phi.value[:] = rng.normal(size=k + 1)

    def f(W1, W2, phi):
        return loss_fn(attention_batch(AdapterParams(W1, W2, phi), h_x, r_emb), base, r_labels, targets)

    report = grad_check(f, [p.W1, p.W2, p.phi], tol=1e-6)
    assert report.passed, report


# -- retrieval with dropout -------------------------------------------------

def small_index():
    keys = np.arange(6, dtype=float)[:, None]
    return build(keys, [(i, i % 2) for i in range(6)])


def test_training_retrieval_drops_self():
    rs = retrieve_with_dropout(small_index(), [2.0], 2, training=True, self_id=2)
    assert 2 not in rs.ids and len(rs) == 2
    assert rs.ids == [1, 3]


def test_training_retrieval_without_self_drops_nearest():
    rs = retrieve_with_dropout(small_index(), [2.0], 2, training=True, self_id=99)
    assert rs.ids == [1, 3]


def test_eval_retrieval_keeps_self():
    assert retrieve_with_dropout(small_index(), [2.0], 2, training=False).ids == [2, 1]


def test_dropout_matches_brute_force():
    rng = np.random.default_rng(7)
    keys = rng.normal(size=(60, 4))
    index = build(keys, [(i, int(i % 3)) for i in range(60)])
    _, _, r_ids, _ = retrieve_batch(index, keys, 5, training=True, self_ids=np.arange(60))
    for i in range(60):
        order = sorted((float(np.linalg.norm(keys[i] - keys[j])), j) for j in range(60) if j != i)
        assert r_ids[i].tolist() == [j for _, j in order[:5]]


def test_training_retrieval_needs_enough_entries():
    with pytest.raises(ValueError, match="k\\+1"):
        retrieve_with_dropout(small_index(), [0.0], 6, training=True, self_id=0)


# -- training ---------------------------------------------------------------

def synthetic_split(rng, n, model_right: bool, k=3, d=4, C=3):
    """Exactly one source is right: the frozen model or the retrieved labels."""
    targets = rng.integers(0, C, size=n)
    emb = rng.normal(size=(n, d))
    wrong = (targets + 1) % C
    base = np.full((n, C), 0.05)
    base[np.arange(n), targets if model_right else wrong] = 0.9
    r_labels = np.repeat((wrong if model_right else targets)[:, None], k, axis=1)
    return PreparedSplit(np.arange(n), targets, emb, base, rng.normal(size=(n, k, d)), r_labels,
                         np.arange(n * k).reshape(n, k) + 10_000, np.ones((n, k)))


def stub_model(d=4, task=Task("multiclass", 3)):
    return SimpleNamespace(task=task, embedding_dim=d)


@pytest.mark.parametrize("model_right", [False, True])
def test_adapter_learns_which_source_to_trust(model_right):
    rng = np.random.default_rng(8)
    train, valid = synthetic_split(rng, 128, model_right), synthetic_split(rng, 64, model_right)
    params = train_adapter(stub_model(), None, train, valid, m2=30, k=3, seed=0)
    attn, out = predict_split(params, valid, Task("multiclass", 3))
    _, uniform = predict_split(None, valid, Task("multiclass", 3))
    if model_right:
        assert attn[:, 0].mean() > 0.25
    else:
        assert attn[:, 0].mean() < 0.25
    acc = np.mean(out.argmax(axis=1) == valid.targets)
    assert acc >= np.mean(uniform.argmax(axis=1) == valid.targets)
    assert acc > 0.9


def test_train_adapter_deterministic_and_reports_retrievals():
    rng = np.random.default_rng(9)
    train, valid = synthetic_split(rng, 40, False), synthetic_split(rng, 20, False)
    seen = []
    a = train_adapter(stub_model(), None, train, valid, m2=3, k=3, seed=1,
                      on_retrieval=lambda q, r: seen.append((q, r)))
    b = train_adapter(stub_model(), None, train, valid, m2=3, k=3, seed=1)
    for name in ("W1", "W2", "phi"):
        np.testing.assert_array_equal(a.arrays()[name], b.arrays()[name])
    assert sum(len(q) for q, _ in seen) == 3 * 40
    assert all(not np.isin(q, r).any() for q, r in seen)


def test_regression_adapter_improves_mae():
    rng = np.random.default_rng(10)
    n, k = 96, 3

    def split(n):
        y = rng.uniform(0, 10, size=n)
        return PreparedSplit(np.arange(n), y, rng.normal(size=(n, 4)), np.zeros(n), rng.normal(size=(n, k, 4)),
                             np.repeat(y[:, None], k, axis=1) + rng.normal(0, 0.1, (n, k)),
                             np.arange(n * k).reshape(n, k) + 10_000, np.ones((n, k)))

    train, valid = split(n), split(48)
    task = Task("regression")
    params = train_adapter(stub_model(task=task), None, train, valid, m2=40, k=k, seed=0)
    _, before = predict_split(None, valid, task)
    _, after = predict_split(params, valid, task)
    assert np.mean(np.abs(after - valid.targets)) < np.mean(np.abs(before - valid.targets))
