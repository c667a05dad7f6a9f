"""Finite-difference gradient checks over random small instances, per component."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .adapter import AdapterParams, attention_batch, cls_loss_batch, reg_loss_batch
from .autodiff import Tensor, grad_check
from .gnn import GnnConfig, GraphBatch, ModelParams, encode_batch, gcn_layer, gin_layer, phase1_loss, task_head
from .graph import Example, Graph, Task
from .optim import BatchNormState

TOL = 1e-5


@dataclass
class ComponentResult:
    name: str
    instances: int
    max_rel_err: float
    failures: int

    @property
    def passed(self) -> bool:
        return self.failures == 0


def random_graph(rng: np.random.Generator, d_v: int, d_e: int | None = None) -> Graph:
    n = int(rng.integers(3, 8))
    edges = {(int(rng.integers(0, v)), v) for v in range(1, n)}
    for _ in range(int(rng.integers(0, n))):
        u, v = sorted(int(x) for x in rng.choice(n, 2, replace=False))
        edges.add((u, v))
    edges = sorted(edges)
    edge_feat = rng.normal(size=(len(edges), d_e)) if d_e else None
    return Graph(n, edges, rng.normal(size=(n, d_v)), edge_feat)


def _linear_probe(out: Tensor, weights: np.ndarray) -> Tensor:
    # a random linear functional keeps every output entry in play
    return ad.sum_(ad.mul(out, Tensor(weights)))


def _primitives(rng):
    a = Tensor(rng.normal(size=(4, 3)))
    b = Tensor(rng.normal(size=(3, 5)))
    w = rng.normal(size=(4, 5))

    def f(a, b):
        z = ad.sigmoid(ad.matmul(ad.relu(a), b))
        s = ad.softmax_row(ad.add(z, ad.exp(ad.scale(z, 0.3))))
        return ad.add(_linear_probe(s, w), ad.mean(ad.log(ad.add(ad.square(a), Tensor(np.ones((4, 3)))))))

    return f, [a, b]


def _gcn(rng):
    d_v, d_e, H = 3, 2, 4
    g = random_graph(rng, d_v, d_e)
    h = Tensor(g.node_feat)
    W = Tensor(rng.normal(size=(d_v, H)))
    P = Tensor(rng.normal(size=(d_e, H)))
    bn = BatchNormState.create(H)
    bn.gamma.value[:] = rng.uniform(0.5, 1.5, H)
    bn.beta.value[:] = rng.normal(size=H) + 0.5
    probe = rng.normal(size=(g.num_nodes, H))
    return (lambda h, W, P, gamma, beta: _linear_probe(gcn_layer(h, g, W, bn, True, P), probe)), \
        [h, W, P, bn.gamma, bn.beta]


def _gin(rng):
    d_v, d_e, H = 3, 2, 4
    g = random_graph(rng, d_v, d_e)
    h = Tensor(g.node_feat)
    mlp = [Tensor(rng.normal(size=(d_v, H))), Tensor(rng.normal(size=H)),
           Tensor(rng.normal(size=(H, H))), Tensor(rng.normal(size=H))]
    eps = Tensor(rng.normal(size=1) * 0.3)
    P = Tensor(rng.normal(size=(d_e, d_v)))
    bn = BatchNormState.create(H)
    probe = rng.normal(size=(g.num_nodes, H))

    def f(h, W1, b1, W2, b2, eps, P, gamma, beta):
        return _linear_probe(gin_layer(h, g, (W1, b1, W2, b2), eps, bn, True, P), probe)

    return f, [h, *mlp, eps, P, bn.gamma, bn.beta]


def _composite(rng, i: int):
    kind = "gin" if i % 2 == 0 else "gcn"
    task = Task("multiclass", 3) if i % 4 < 2 else Task("regression")
    cfg = GnnConfig(kind=kind, layers=2, hidden_dim=4, readout="sum" if i % 3 else "mean",
                    learn_eps=kind == "gin")
    model = ModelParams.init(cfg, task, 3, None, 2, seed=int(rng.integers(2**31)))
    for st in model.bn.values():
        st.running_mean = rng.normal(size=4) * 0.1
        st.running_var = rng.uniform(0.5, 1.5, size=4)
    examples = []
    for j in range(3):
        label = int(rng.integers(3)) if task.is_classification else float(rng.normal())
        examples.append(Example((random_graph(rng, 3), random_graph(rng, 3)), label, j))
    batch = GraphBatch.from_examples(examples)
    labels = [ex.label for ex in examples]

    def f(*_):
        # grad_check perturbs the model's own tensors in place
        return phase1_loss(task_head(encode_batch(model, batch, training=False), model), labels, task)

    return f, list(model.trainable().values())


def _adapter(rng, classification: bool):
    B, k, d = 3, 3, 5
    h_x, r_emb = rng.normal(size=(B, d)), rng.normal(size=(B, k, d))
    p = AdapterParams.init(d, k, d_proj=int(rng.integers(2, 6)), seed=int(rng.integers(2**31)))
    p.phi.value[:] = rng.normal(size=k + 1)
    if classification:
        C = 4
        base = rng.dirichlet(np.ones(C), size=B)
        r_labels, targets = rng.integers(0, C, size=(B, k)), rng.integers(0, C, size=B)
        loss_fn = cls_loss_batch
    else:
        base = rng.normal(size=B)
        r_labels, targets = rng.normal(size=(B, k)), rng.normal(size=B)
        loss_fn = reg_loss_batch

    def f(W1, W2, phi):
        return loss_fn(attention_batch(AdapterParams(W1, W2, phi), h_x, r_emb), base, r_labels, targets)

    return f, [p.W1, p.W2, p.phi]


COMPONENTS: dict[str, Callable] = {
    "autodiff": lambda rng, i: _primitives(rng),
    "gcn_layer": lambda rng, i: _gcn(rng),
    "gin_layer": lambda rng, i: _gin(rng),
    "readout_head_loss": _composite,
    "cls_loss": lambda rng, i: _adapter(rng, True),
    "reg_loss": lambda rng, i: _adapter(rng, False),
}


def run_component(name: str, instances: int = 20, seed: int = 0, tol: float = TOL) -> ComponentResult:
    rng = np.random.default_rng([seed, sorted(COMPONENTS).index(name)])
    worst, failures = 0.0, 0
    for i in range(instances):
        f, points = COMPONENTS[name](rng, i)
        report = grad_check(f, points, tol=tol)
        worst = max(worst, report.max_rel_err)
        failures += not report.passed
    return ComponentResult(name, instances, worst, failures)


def run_suite(instances: int = 20, seed: int = 0, tol: float = TOL,
              components=None) -> list[ComponentResult]:
    return [run_component(n, instances, seed, tol) for n in (components or COMPONENTS)]
