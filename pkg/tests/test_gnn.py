import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from regnn import autodiff as ad
from regnn.autodiff import Tensor, grad_check
from regnn.gnn import (GnnConfig, GraphBatch, ModelParams, encode_batch, encode_input, gcn_layer,
                       gin_layer, phase1_loss, readout, task_head)
from regnn.graph import Example, Graph, Task


def path_graph(n, d=2, seed=0):
    feat = np.random.default_rng(seed).normal(size=(n, d))
    return Graph(n, [[i, i + 1] for i in range(n - 1)], feat)


def random_graph(n, d, seed, p=0.5):
    rng = np.random.default_rng(seed)
    edges = [[u, v] for u in range(n) for v in range(u + 1, n) if rng.random() < p]
    return Graph(n, edges, rng.normal(size=(n, d)))


def test_gcn_isolated_node_is_relu():
    g = Graph(1, [], [[-2.0, 3.0]])
    out = gcn_layer(Tensor(g.node_feat), g, Tensor(np.eye(2)))
    np.testing.assert_array_equal(out.value, [[0.0, 3.0]])


def test_gcn_symmetric_nodes_equal():
    g = Graph(2, [[0, 1]], [[1.0, 2.0], [1.0, 2.0]])
    W = Tensor(np.random.default_rng(0).normal(size=(2, 3)))
    out = gcn_layer(Tensor(g.node_feat), g, W).value
    np.testing.assert_array_equal(out[0], out[1])


def test_gcn_matches_dense_oracle():
    g = path_graph(4, d=3, seed=1)
    W = np.random.default_rng(2).normal(size=(3, 5))
    a_tilde = g.adjacency() + np.eye(4)
    d_inv = np.diag(1 / np.sqrt(a_tilde.sum(axis=1)))
    oracle = np.maximum(d_inv @ a_tilde @ d_inv @ g.node_feat @ W, 0)
    out = gcn_layer(Tensor(g.node_feat), g, Tensor(W)).value
    np.testing.assert_allclose(out, oracle, rtol=1e-12, atol=1e-12)


def test_gin_sum_example():
    g = Graph(3, [[0, 1], [0, 2]], [[3.0], [1.0], [2.0]])
    out = gin_layer(Tensor(g.node_feat), g, None, eps=0.0)
    assert out.value[0, 0] == 6.0


def test_gin_isolated_node_unchanged():
    g = Graph(2, [], [[3.0], [-1.0]])
    np.testing.assert_array_equal(gin_layer(Tensor(g.node_feat), g, None).value, g.node_feat)


def test_gin_matches_adjacency_loop_oracle():
    g = random_graph(5, 3, seed=4)
    rng = np.random.default_rng(5)
    W1, b1, W2, b2 = rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(4, 4)), rng.normal(size=4)
    eps = 0.3
    nbrs = {v: set() for v in range(5)}
    for u, v in g.edges.tolist():
        nbrs[u].add(v)
        nbrs[v].add(u)
    oracle = []
    for v in range(5):
        agg = (1 + eps) * g.node_feat[v] + sum((g.node_feat[u] for u in nbrs[v]), np.zeros(3))
        oracle.append(np.maximum(agg @ W1 + b1, 0) @ W2 + b2)
    mlp = tuple(Tensor(x) for x in (W1, b1, W2, b2))
    out = gin_layer(Tensor(g.node_feat), g, mlp, eps=eps).value
    np.testing.assert_allclose(out, np.array(oracle), rtol=1e-12, atol=1e-12)


def test_gin_edge_features_added_to_messages():
    g = Graph(2, [[0, 1]], [[1.0], [2.0]], edge_feat=[[5.0]])
    P = Tensor(np.array([[0.5]]))
    out = gin_layer(Tensor(g.node_feat), g, None, edge_proj=P).value
    np.testing.assert_allclose(out, [[1 + 2 + 2.5], [2 + 1 + 2.5]])


def test_readout_modes():
    h = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(readout(h, "sum").value, [[4, 6]])
    np.testing.assert_array_equal(readout(h, "mean").value, [[2, 3]])
    with pytest.raises(ValueError, match="empty"):
        readout(Tensor(np.zeros((0, 2))))


@settings(max_examples=30, deadline=None)
@given(st.permutations(range(5)), st.sampled_from(["sum", "mean"]))
def test_readout_permutation_invariant(perm, mode):
    h = np.random.default_rng(0).normal(size=(5, 3))
    np.testing.assert_allclose(readout(Tensor(h[list(perm)]), mode).value,
                               readout(Tensor(h), mode).value, rtol=1e-12)


def make_model(kind="gin", task=Task("multiclass", 3), d_v=2, gpe=1, seed=0, **kw):
    cfg = GnnConfig(kind=kind, layers=2, hidden_dim=4, **kw)
    model = ModelParams.init(cfg, task, d_v, None, gpe, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for st_ in model.bn.values():
        st_.running_mean = rng.normal(size=4) * 0.1
        st_.running_var = rng.uniform(0.5, 1.5, size=4)
    return model


def test_encode_input_concatenates_in_order():
    g1, g2 = path_graph(3, seed=1), random_graph(4, 2, seed=2)
    single = make_model()
    h1 = encode_input(Example((g1,), 0, 0), single).value
    h2 = encode_input(Example((g2,), 0, 1), single).value
    pair = make_model(gpe=2)
    pair.load_arrays({k: v for k, v in single.arrays().items() if not k.startswith("head.")}
                     | {k: v for k, v in pair.arrays().items() if k.startswith("head.")})
    h12 = encode_input(Example((g1, g2), 0, 2), pair).value
    h21 = encode_input(Example((g2, g1), 0, 3), pair).value
    np.testing.assert_allclose(h12, np.concatenate([h1, h2]), rtol=1e-12)
    np.testing.assert_allclose(h21, np.concatenate([h2, h1]), rtol=1e-12)


@pytest.mark.parametrize("kind", ["gin", "gcn"])
@settings(max_examples=15, deadline=None)
@given(perm=st.permutations(range(6)))
def test_encoding_permutation_invariant(kind, perm):
    g = random_graph(6, 2, seed=9)
    model = make_model(kind)
    a = encode_input(Example((g,), 0, 0), model).value
    b = encode_input(Example((g.permuted(list(perm)),), 0, 0), model).value
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_task_head_zero_logits_binary():
    model = make_model(task=Task("binary"))
    model.params["head.W"].value[:] = 0
    model.params["head.b"].value[:] = 0
    np.testing.assert_allclose(task_head(Tensor(np.ones(4)), model).value, [[0.5, 0.5]])


def test_task_head_outputs_distributions():
    model = make_model()
    h = Tensor(np.random.default_rng(1).normal(size=(6, 4)) * 10)
    p = task_head(h, model).value
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_regression_head_is_affine():
    model = make_model(task=Task("regression"))
    h = np.array([1.0, -2.0, 0.5, 3.0])
    w, b = model.params["head.W"].value[:, 0], model.params["head.b"].value[0]
    assert task_head(Tensor(h), model).value[0, 0] == pytest.approx(w @ h + b, rel=1e-12)


@pytest.mark.parametrize("pred, label, task, expected", [
    ([1.0, 0.0], 0, Task("binary"), 0.0),
    ([0.5, 0.5], 1, Task("binary"), np.log(2)),
    ([3.0], 5.0, Task("regression"), 4.0),
])
def test_phase1_loss(pred, label, task, expected):
    assert phase1_loss(Tensor(pred), label, task).item() == pytest.approx(expected, abs=1e-12)


def test_phase1_loss_rejects_bad_class():
    with pytest.raises(ValueError, match="out of range"):
        phase1_loss(Tensor([0.5, 0.5]), 2, Task("binary"))


@pytest.mark.parametrize("kind", ["gin", "gcn"])
@pytest.mark.parametrize("task", [Task("multiclass", 3), Task("regression")])
def test_full_model_gradient_check(kind, task):
    rng = np.random.default_rng(7)
    examples = [Example((random_graph(4, 2, seed=s),), int(rng.integers(3)) if task.is_classification
                        else float(rng.normal()), s) for s in range(3)]
    model = make_model(kind, task=task)
    batch = GraphBatch.from_examples(examples)
    labels = [ex.label for ex in examples]
    params = model.trainable()
    names = list(params)

    def f(*tensors):
        for name, t in zip(names, tensors):
            model_tensors[name] = t
        return phase1_loss(task_head(encode_batch(model, batch, training=False), model), labels, task)

    model_tensors = params
    report = grad_check(f, [params[n] for n in names], tol=1e-5)
    assert report.passed, report


def cycle_features(types):
    return np.eye(2)[types]


def test_six_cycle_vs_two_triangles_needs_node_labels():
    six = [[i, (i + 1) % 6] for i in range(6)]
    tri = [[0, 1], [1, 2], [0, 2], [3, 4], [4, 5], [3, 5]]
    model = make_model("gin", d_v=2, seed=3)
    # identical features: both graphs are 2-regular, so message passing cannot separate them
    same = np.tile([1.0, 0.0], (6, 1))
    a = encode_input(Example((Graph(6, six, same),), 0, 0), model).value
    b = encode_input(Example((Graph(6, tri, same),), 0, 1), model).value
    np.testing.assert_allclose(a, b, rtol=1e-12)
    # same multiset of node types, alternating on the cycle
    a = encode_input(Example((Graph(6, six, cycle_features([0, 1, 0, 1, 0, 1])),), 0, 0), model).value
    b = encode_input(Example((Graph(6, tri, cycle_features([0, 0, 0, 1, 1, 1])),), 0, 1), model).value
    assert np.linalg.norm(a - b) > 1e-6


def test_no_tape_left_after_inference():
    from regnn.gnn import infer
    model = make_model()
    ad.current_tape().clear()
    infer(model, [Example((path_graph(3),), 0, 0)])
    assert len(ad.current_tape()) == 0
