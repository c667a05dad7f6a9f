"""GCN and GIN encoders, readout, multi-graph input encoding and the task head."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .graph import Example, Graph, Task
from .optim import BatchNormState, batch_norm

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class GnnConfig:
    kind: str = "gin"
    layers: int = 3
    hidden_dim: int = 64
    readout: str = "sum"
    use_edge_feat: bool = False
    gin_eps: float = 0.0
    learn_eps: bool = False
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.kind not in ("gcn", "gin"):
            raise ValueError(f"unknown GNN kind {self.kind!r}")
        if self.layers < 1 or self.hidden_dim < 1:
            raise ValueError("layers and hidden_dim must be >= 1")
        if self.readout not in ("sum", "mean"):
            raise ValueError(f"unknown readout {self.readout!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class GraphBatch:
    """Block-diagonal union of graphs, ordered example-major.

    Every undirected edge appears in both directions in ``src``/``dst``.
    """

    def __init__(self, graphs: Sequence[Graph], graphs_per_example: int = 1):
        if not graphs:
            raise ValueError("empty batch")
        self.num_graphs = len(graphs)
        self.graphs_per_example = graphs_per_example
        offsets = np.cumsum([0] + [g.num_nodes for g in graphs])
        self.num_nodes = int(offsets[-1])
        self.x = np.concatenate([g.node_feat for g in graphs], axis=0)
        self.node_graph = np.repeat(np.arange(self.num_graphs), [g.num_nodes for g in graphs])
        src, dst, efeat = [], [], []
        for off, g in zip(offsets, graphs):
            if g.num_edges:
                e = g.edges + off
                src += [e[:, 0], e[:, 1]]
                dst += [e[:, 1], e[:, 0]]
                if g.edge_feat is not None:
                    efeat += [g.edge_feat, g.edge_feat]
        self.src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
        self.dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
        if not graphs[0].has_edge_feat:
            self.edge_attr = None
        else:
            self.edge_attr = np.concatenate(efeat) if efeat else np.zeros((0, 0))
        deg = np.bincount(self.dst, minlength=self.num_nodes).astype(np.float64) + 1.0
        loops = np.arange(self.num_nodes)
        self.gcn_src = np.concatenate([self.src, loops])
        self.gcn_dst = np.concatenate([self.dst, loops])
        self.gcn_coef = 1.0 / np.sqrt(deg[self.gcn_src] * deg[self.gcn_dst])

    @classmethod
    def from_examples(cls, examples: Sequence[Example]) -> "GraphBatch":
        return cls([g for ex in examples for g in ex.graphs], len(examples[0].graphs))

    @property
    def num_examples(self) -> int:
        return self.num_graphs // self.graphs_per_example


def _as_batch(graph) -> GraphBatch:
    return graph if isinstance(graph, GraphBatch) else GraphBatch([graph])


def _edge_messages(batch: GraphBatch, edge_proj: Tensor | None) -> Tensor | None:
    if edge_proj is None or batch.edge_attr is None:
        return None
    if len(batch.edge_attr) == 0:
        return Tensor(np.zeros((0, edge_proj.shape[1])))
    return ad.matmul(Tensor(batch.edge_attr), edge_proj)


def gcn_layer(h: Tensor, graph, W: Tensor, bn: BatchNormState | None = None, training: bool = False,
              edge_proj: Tensor | None = None) -> Tensor:
    """ReLU(BN(D^-1/2 (A+I) D^-1/2 h W)); projected edge features join each neighbor message."""
    batch = _as_batch(graph)
    if h.shape[0] != batch.num_nodes:
        raise ValueError(f"gcn_layer: h has {h.shape[0]} rows, graph has {batch.num_nodes} nodes")
    hw = ad.matmul(h, W)
    msg = ad.gather_rows(hw, batch.gcn_src)
    e = _edge_messages(batch, edge_proj)
    if e is not None:
        pad = Tensor(np.zeros((batch.num_nodes, e.shape[1])))
        msg = ad.add(msg, ad.concat_rows([e, pad]))
    msg = ad.mul(msg, Tensor(batch.gcn_coef[:, None]))
    out = ad.scatter_sum(msg, batch.gcn_dst, batch.num_nodes)
    if bn is not None:
        out = batch_norm(out, bn, training)
    return ad.relu(out)


def mlp2(x: Tensor, W1: Tensor, b1: Tensor, W2: Tensor, b2: Tensor) -> Tensor:
    hidden = ad.relu(ad.add(ad.matmul(x, W1), b1))
    return ad.add(ad.matmul(hidden, W2), b2)


def gin_layer(h: Tensor, graph, mlp: Sequence[Tensor] | None, eps=0.0,
              bn: BatchNormState | None = None, training: bool = False,
              edge_proj: Tensor | None = None) -> Tensor:
    """BN(MLP((1 + eps) h_v + sum of neighbor messages)).

    ``mlp`` is ``(W1, b1, W2, b2)`` or None for identity; ``eps`` may be a
    float or a learnable 1-element Tensor.
    """
    batch = _as_batch(graph)
    if h.shape[0] != batch.num_nodes:
        raise ValueError(f"gin_layer: h has {h.shape[0]} rows, graph has {batch.num_nodes} nodes")
    msg = ad.gather_rows(h, batch.src)
    e = _edge_messages(batch, edge_proj)
    if e is not None:
        msg = ad.add(msg, e)
    neigh = ad.scatter_sum(msg, batch.dst, batch.num_nodes)
    if isinstance(eps, Tensor):
        self_term = ad.add(h, ad.mul(h, eps))
    else:
        self_term = ad.scale(h, 1.0 + eps)
    out = ad.add(self_term, neigh)
    if mlp is not None:
        out = mlp2(out, *mlp)
    if bn is not None:
        out = batch_norm(out, bn, training)
    return out


def readout(h: Tensor, mode: str = "sum", segments=None, num_segments: int = 1) -> Tensor:
    """Pool node rows into one vector per segment (the whole matrix when ``segments`` is None)."""
    if h.shape[0] == 0:
        raise ValueError("readout of an empty graph")
    if segments is None:
        segments = np.zeros(h.shape[0], dtype=np.int64)
    if mode == "sum":
        return ad.scatter_sum(h, segments, num_segments)
    if mode == "mean":
        return ad.segment_mean(h, segments, num_segments)
    raise ValueError(f"unknown readout {mode!r}")


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


class ModelParams:
    """Parameters and batch-norm state of the encoder plus task head."""

    def __init__(self, config: GnnConfig, task: Task, d_v: int, d_e: int | None,
                 graphs_per_example: int, params: dict[str, Tensor], bn: dict[str, BatchNormState]):
        self.config = config
        self.task = task
        self.d_v = d_v
        self.d_e = d_e
        self.graphs_per_example = graphs_per_example
        self.params = params
        self.bn = bn

    @classmethod
    def init(cls, config: GnnConfig, task: Task, d_v: int, d_e: int | None = None,
             graphs_per_example: int = 1, seed: int = 0) -> "ModelParams":
        rng = np.random.default_rng(seed)
        H = config.hidden_dim
        params: dict[str, Tensor] = {}
        bn: dict[str, BatchNormState] = {}
        dim_in = d_v
        for t in range(config.layers):
            p = f"layer{t}."
            if config.kind == "gcn":
                params[p + "W"] = _uniform(rng, dim_in, (dim_in, H))
            else:
                params[p + "mlp.W1"] = _uniform(rng, dim_in, (dim_in, H))
                params[p + "mlp.b1"] = _uniform(rng, dim_in, (H,))
                params[p + "mlp.W2"] = _uniform(rng, H, (H, H))
                params[p + "mlp.b2"] = _uniform(rng, H, (H,))
                if config.learn_eps:
                    params[p + "eps"] = Tensor(np.array([config.gin_eps]), requires_grad=True)
            if config.use_edge_feat and d_e is not None:
                width = H if config.kind == "gcn" else dim_in
                params[p + "edge_proj"] = _uniform(rng, d_e, (d_e, width))
            bn[p + "bn"] = BatchNormState.create(H, config.bn_momentum, config.bn_eps)
            dim_in = H
        emb = H * graphs_per_example
        params["head.W"] = _uniform(rng, emb, (emb, task.output_dim))
        params["head.b"] = _uniform(rng, emb, (task.output_dim,))
        return cls(config, task, d_v, d_e, graphs_per_example, params, bn)

    @property
    def embedding_dim(self) -> int:
        return self.config.hidden_dim * self.graphs_per_example

    def trainable(self) -> dict[str, Tensor]:
        out = dict(self.params)
        for name, st in self.bn.items():
            out[name + ".gamma"] = st.gamma
            out[name + ".beta"] = st.beta
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Every numeric array, including batch-norm running statistics."""
        out = {name: t.value for name, t in self.trainable().items()}
        for name, st in self.bn.items():
            out[name + ".running_mean"] = st.running_mean
            out[name + ".running_var"] = st.running_var
        return dict(sorted(out.items()))

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = self.arrays()
        if set(arrays) != set(expected):
            missing = set(expected) ^ set(arrays)
            raise ValueError(f"parameter set mismatch: {sorted(missing)[:5]}")
        for name, value in arrays.items():
            if value.shape != expected[name].shape:
                raise ValueError(f"shape mismatch for {name}: {value.shape} vs {expected[name].shape}")
        trainable = self.trainable()
        for name, value in arrays.items():
            if name in trainable:
                trainable[name].value = np.array(value, dtype=np.float64)
            elif name.endswith(".running_mean"):
                self.bn[name[: -len(".running_mean")]].running_mean = np.array(value, dtype=np.float64)
            else:
                self.bn[name[: -len(".running_var")]].running_var = np.array(value, dtype=np.float64)

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, value in self.arrays().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(value, dtype="<f8").tobytes())
        return h.hexdigest()


def encode_batch(params: ModelParams, batch: GraphBatch, training: bool = False) -> Tensor:
    """h_X for every example in the batch: per-graph readouts concatenated in order."""
    cfg = params.config
    p = params.params
    h = Tensor(batch.x)
    for t in range(cfg.layers):
        pre = f"layer{t}."
        bn = params.bn[pre + "bn"]
        edge_proj = p.get(pre + "edge_proj")
        if cfg.kind == "gcn":
            h = gcn_layer(h, batch, p[pre + "W"], bn, training, edge_proj)
        else:
            mlp = (p[pre + "mlp.W1"], p[pre + "mlp.b1"], p[pre + "mlp.W2"], p[pre + "mlp.b2"])
            eps = p.get(pre + "eps", cfg.gin_eps)
            h = gin_layer(h, batch, mlp, eps, bn, training, edge_proj)
            if t < cfg.layers - 1:
                h = ad.relu(h)
    pooled = readout(h, cfg.readout, batch.node_graph, batch.num_graphs)
    return ad.reshape(pooled, (batch.num_examples, batch.graphs_per_example * cfg.hidden_dim))


def encode_input(example: Example, params: ModelParams, training: bool = False) -> Tensor:
    return ad.reshape(encode_batch(params, GraphBatch.from_examples([example]), training), (-1,))


def task_head(h_x: Tensor, params: ModelParams) -> Tensor:
    """Class probabilities (rows sum to one) or a single regression value per row."""
    if h_x.value.ndim == 1:
        h_x = ad.reshape(h_x, (1, -1))
    if h_x.shape[1] != params.embedding_dim:
        raise ValueError(f"task_head: expected dim {params.embedding_dim}, got {h_x.shape[1]}")
    z = ad.add(ad.matmul(h_x, params.params["head.W"]), params.params["head.b"])
    return ad.softmax_row(z) if params.task.is_classification else z


def phase1_loss(pred: Tensor, labels, task: Task) -> Tensor:
    """Mean cross-entropy on probabilities, or mean squared error."""
    if pred.value.ndim == 1:
        pred = ad.reshape(pred, (1, -1))
    if task.is_classification:
        labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
        if labels.min() < 0 or labels.max() >= pred.shape[1]:
            raise ValueError("class index out of range")
        picked = ad.clamp_min(ad.pick(pred, labels), PROB_FLOOR)
        return ad.scale(ad.sum_(ad.log(picked)), -1.0 / len(labels))
    targets = np.atleast_1d(np.asarray(labels, dtype=np.float64)).reshape(-1, 1)
    return ad.mean(ad.square(ad.sub(pred, Tensor(targets))))


def infer(params: ModelParams, examples: Sequence[Example], batch_size: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode embeddings and head outputs for ``examples``; builds no tape."""
    embs, outs = [], []
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            chunk = examples[i:i + batch_size]
            h = encode_batch(params, GraphBatch.from_examples(chunk), training=False)
            embs.append(h.value)
            outs.append(task_head(h, params).value)
    emb = np.concatenate(embs)
    out = np.concatenate(outs)
    return emb, (out if params.task.is_classification else out[:, 0])
