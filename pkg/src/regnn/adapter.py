"""Retrieval with dropout and the self-attention adapter over retrieved labels.

The adapter weighs the frozen model's own prediction (slot 0) against the
labels of the k retrieved training examples (slots 1..k). Attention weights
come from a scaled dot product between a projected query embedding and
projected keys for [h_X, h_1, ..., h_k], plus a learnable per-slot bias.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .gnn import PROB_FLOOR, ModelParams, infer
from .graph import Example, Task
from .index import FlatIndex, Hit
from .metrics import headline, is_better
from .optim import AdamState, adam_step, lr_at


@dataclass
class AdapterParams:
    W1: Tensor
    W2: Tensor
    phi: Tensor

    @classmethod
    def init(cls, d: int, k: int, d_proj: int | None = None, seed: int = 0) -> "AdapterParams":
        d_proj = d if d_proj is None else d_proj
        rng = np.random.default_rng(seed)
        bound = 1.0 / np.sqrt(d)
        return cls(
            Tensor(rng.uniform(-bound, bound, (d_proj, d)), requires_grad=True),
            Tensor(rng.uniform(-bound, bound, (d_proj, d)), requires_grad=True),
            Tensor(np.zeros(k + 1), requires_grad=True),
        )

    @property
    def k(self) -> int:
        return self.phi.shape[0] - 1

    @property
    def d(self) -> int:
        return self.W1.shape[1]

    @property
    def d_proj(self) -> int:
        return self.W1.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        return {"W1": self.W1, "W2": self.W2, "phi": self.phi}

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: t.value for name, t in self.tensors().items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "AdapterParams":
        p = cls(*(Tensor(np.array(arrays[n]), requires_grad=True) for n in ("W1", "W2", "phi")))
        if p.W1.shape != p.W2.shape:
            raise ValueError("W1 and W2 must share shape")
        return p

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.arrays().items()}


# ---------------------------------------------------------------------------
# retrieval


@dataclass(frozen=True)
class RetrievalSet:
    hits: tuple[Hit, ...]

    def __len__(self) -> int:
        return len(self.hits)

    @property
    def embeddings(self) -> np.ndarray:
        return np.stack([h.key for h in self.hits])

    @property
    def labels(self) -> list:
        return [h.label for h in self.hits]

    @property
    def ids(self) -> list[int]:
        return [h.example_id for h in self.hits]

    @property
    def distances(self) -> list[float]:
        return [h.distance for h in self.hits]


def _drop_self(pos: np.ndarray, ids: np.ndarray, self_id: int | None) -> np.ndarray:
    """Index into a (k+1)-row of results with the query's own entry removed.

    When the query is absent, the nearest entry goes instead.
    """
    found = np.flatnonzero(ids == self_id) if self_id is not None else np.zeros(0, dtype=np.int64)
    drop = int(found[0]) if found.size else 0
    return np.delete(np.arange(len(pos)), drop)


def retrieve_with_dropout(index: FlatIndex, h_x, k: int, training: bool,
                          self_id: int | None = None) -> RetrievalSet:
    """Top-k neighbors; in training mode query k+1 and drop the query itself."""
    if training:
        if self_id is None:
            raise ValueError("training-mode retrieval needs self_id")
        if len(index) < k + 1:
            raise ValueError(f"index holds {len(index)} entries, training retrieval needs k+1={k + 1}")
        hits = index.search_topk(h_x, k + 1)
        keep = _drop_self(np.arange(len(hits)), np.array([h.example_id for h in hits]), self_id)
        return RetrievalSet(tuple(hits[i] for i in keep))
    return RetrievalSet(tuple(index.search_topk(h_x, k)))


@dataclass
class PreparedSplit:
    """Frozen-model outputs and retrievals for a split, as dense arrays.

    ``base`` is (n, C) class probabilities or (n,) regression values.
    """

    ids: np.ndarray
    targets: np.ndarray
    emb: np.ndarray
    base: np.ndarray
    r_emb: np.ndarray
    r_labels: np.ndarray
    r_ids: np.ndarray
    r_dist: np.ndarray

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def k(self) -> int:
        return self.r_ids.shape[1]


def retrieve_batch(index: FlatIndex, emb: np.ndarray, k: int, training: bool,
                   self_ids: Sequence[int] | None = None):
    """Vectorised :func:`retrieve_with_dropout`; returns (r_emb, r_labels, r_ids, r_dist)."""
    if training:
        if self_ids is None:
            raise ValueError("training-mode retrieval needs self_ids")
        if len(index) < k + 1:
            raise ValueError(f"index holds {len(index)} entries, training retrieval needs k+1={k + 1}")
        pos, dist = index.search_batch(emb, k + 1)
        keep = np.stack([_drop_self(p, index.ids[p], sid) for p, sid in zip(pos, self_ids)])
        pos = np.take_along_axis(pos, keep, axis=1)
        dist = np.take_along_axis(dist, keep, axis=1)
    else:
        pos, dist = index.search_batch(emb, k)
    return index.keys[pos], index.labels[pos], index.ids[pos], dist


def prepare_split(model: ModelParams, index: FlatIndex, examples: Sequence[Example], k: int,
                  training: bool) -> PreparedSplit:
    emb, base = infer(model, examples)
    ids = np.array([ex.id for ex in examples], dtype=np.int64)
    targets = np.array([ex.label for ex in examples])
    r_emb, r_labels, r_ids, r_dist = retrieve_batch(index, emb, k, training, ids if training else None)
    return PreparedSplit(ids, targets, emb, base, r_emb, r_labels, r_ids, r_dist)


# ---------------------------------------------------------------------------
# attention and label mixing


def attention_batch(params: AdapterParams, h_x: np.ndarray, r_emb: np.ndarray) -> Tensor:
    """Attention weights, shape (B, k+1), for query embeddings (B, d) and retrievals (B, k, d)."""
    h_x = np.atleast_2d(h_x)
    B, d = h_x.shape
    if r_emb.ndim != 3 or r_emb.shape[0] != B or r_emb.shape[2] != d:
        raise ValueError(f"retrieved embeddings have shape {r_emb.shape}, expected ({B}, k, {d})")
    n = r_emb.shape[1] + 1
    if n != params.phi.shape[0]:
        raise ValueError(f"adapter expects k={params.k}, got {n - 1} retrievals")
    if d != params.d:
        raise ValueError(f"adapter expects dim {params.d}, got {d}")
    H = np.concatenate([h_x[:, None, :], r_emb], axis=1).reshape(B * n, d)
    q = ad.matmul(Tensor(h_x), ad.transpose(params.W1))
    keys = ad.matmul(Tensor(H), ad.transpose(params.W2))
    q_rep = ad.gather_rows(q, np.repeat(np.arange(B), n))
    scores = ad.reshape(ad.sum_(ad.mul(q_rep, keys), axis=1), (B, n))
    scores = ad.add(ad.scale(scores, 1.0 / np.sqrt(params.d_proj)), params.phi)
    return ad.softmax_row(scores)


def compute_attention(params: AdapterParams, h_x, retrieved: RetrievalSet) -> Tensor:
    return ad.reshape(attention_batch(params, np.asarray(h_x)[None, :], retrieved.embeddings[None]),
                      (-1,))


def uniform_attention(batch: int, k: int) -> Tensor:
    return Tensor(np.full((batch, k + 1), 1.0 / (k + 1)))


def mix_classes(attn: Tensor, base: np.ndarray, r_labels: np.ndarray) -> Tensor:
    """Adjusted class distribution: attn[0] * base + attention mass of retrievals per class."""
    B, C = base.shape
    n = r_labels.shape[1] + 1
    if r_labels.size and (r_labels.min() < 0 or r_labels.max() >= C):
        raise ValueError("retrieved class label out of range")
    z = np.zeros((B, n, C))
    z[:, 0, :] = base
    rows = np.repeat(np.arange(B), n - 1)
    slots = np.tile(np.arange(1, n), B)
    z[rows, slots, r_labels.reshape(-1)] = 1.0
    weighted = ad.mul(ad.reshape(attn, (B * n, 1)), Tensor(z.reshape(B * n, C)))
    return ad.scatter_sum(weighted, np.repeat(np.arange(B), n), B)


def mix_values(attn: Tensor, base: np.ndarray, r_values: np.ndarray) -> Tensor:
    z = np.concatenate([np.asarray(base, dtype=np.float64).reshape(-1, 1), r_values], axis=1)
    return ad.sum_(ad.mul(attn, Tensor(z)), axis=1)


def cls_loss_batch(attn: Tensor, base: np.ndarray, r_labels: np.ndarray, targets) -> Tensor:
    mixed = mix_classes(attn, base, r_labels)
    picked = ad.clamp_min(ad.pick(mixed, np.asarray(targets, dtype=np.int64)), PROB_FLOOR)
    return ad.scale(ad.sum_(ad.log(picked)), -1.0 / base.shape[0])


def reg_loss_batch(attn: Tensor, base: np.ndarray, r_values: np.ndarray, targets) -> Tensor:
    err = ad.sub(mix_values(attn, base, r_values), Tensor(np.asarray(targets, dtype=np.float64)))
    return ad.mean(ad.square(err))


def _as_attn_row(attn) -> Tensor:
    attn = ad.as_tensor(attn)
    return ad.reshape(attn, (1, -1)) if attn.value.ndim == 1 else attn


def cls_loss(attn, l_x, retrieved_labels, c: int) -> Tensor:
    """-log(attn[0] * l_x[c] + sum of attn[i] over retrievals labelled c), floored at 1e-12."""
    return cls_loss_batch(_as_attn_row(attn), np.asarray(l_x, dtype=np.float64)[None, :],
                          np.asarray(retrieved_labels, dtype=np.int64)[None, :], [c])


def reg_loss(attn, l_x: float, retrieved_values, c: float) -> Tensor:
    return reg_loss_batch(_as_attn_row(attn), np.array([l_x]),
                          np.asarray(retrieved_values, dtype=np.float64)[None, :], [c])


def cls_predict(attn, l_x, retrieved_labels) -> tuple[np.ndarray, int]:
    with ad.no_grad():
        mixed = mix_classes(_as_attn_row(attn), np.asarray(l_x, dtype=np.float64)[None, :],
                            np.asarray(retrieved_labels, dtype=np.int64)[None, :]).value[0]
    return mixed, int(np.argmax(mixed))


def reg_predict(attn, l_x: float, retrieved_values) -> float:
    with ad.no_grad():
        out = mix_values(_as_attn_row(attn), np.array([l_x]),
                         np.asarray(retrieved_values, dtype=np.float64)[None, :])
    return float(out.value[0])


def averaging_predict(l_x, retrieved_labels, task: Task):
    """Enhanced prediction with every slot weighted 1/(k+1)."""
    k = len(retrieved_labels)
    attn = uniform_attention(1, k)
    if task.is_classification:
        return cls_predict(attn, l_x, retrieved_labels)
    return reg_predict(attn, float(l_x), retrieved_values=retrieved_labels)


# ---------------------------------------------------------------------------
# batched prediction on a prepared split


def predict_split(params: AdapterParams | None, prep: PreparedSplit, task: Task,
                  batch_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """(attention, output) over a split; ``params=None`` means uniform attention.

    Output is the adjusted distribution (n, C) or the mixed value (n,).
    """
    attns, outs = [], []
    with ad.no_grad():
        for s in range(0, len(prep), batch_size):
            sl = slice(s, s + batch_size)
            n = len(prep.ids[sl])
            if params is None:
                attn = uniform_attention(n, prep.k)
            else:
                attn = attention_batch(params, prep.emb[sl], prep.r_emb[sl])
            if task.is_classification:
                out = mix_classes(attn, prep.base[sl], prep.r_labels[sl])
            else:
                out = mix_values(attn, prep.base[sl], prep.r_labels[sl])
            attns.append(attn.value)
            outs.append(out.value)
    return np.concatenate(attns), np.concatenate(outs)


def point_predictions(task: Task, output: np.ndarray) -> np.ndarray:
    """Values fed to the headline metric: argmax class, P(class 1), or the value."""
    if task.kind == "multiclass":
        return output.argmax(axis=1)
    if task.kind == "binary":
        return output[:, 1]
    return output


def split_metric(params: AdapterParams | None, prep: PreparedSplit, task: Task) -> float:
    _, out = predict_split(params, prep, task)
    return headline(task.metric, point_predictions(task, out), prep.targets)


# ---------------------------------------------------------------------------
# training

RetrievalHook = Callable[[np.ndarray, np.ndarray], None]


def train_adapter(model: ModelParams, index: FlatIndex, train: Sequence[Example] | PreparedSplit,
                  valid: Sequence[Example] | PreparedSplit, m2: int, k: int, seed: int,
                  lr: float = 0.01, batch_size: int = 32, d_proj: int | None = None,
                  on_epoch: Callable[[dict], None] | None = None,
                  on_retrieval: RetrievalHook | None = None) -> AdapterParams:
    """Fit W1, W2 and phi with the model frozen; return the best-on-validation adapter.

    ``train`` is retrieved in training mode (self dropped) and ``valid`` in
    eval mode; either may be passed pre-computed. ``on_retrieval`` sees the
    query ids and retrieved ids of every minibatch actually used.
    """
    task = model.task
    if not isinstance(train, PreparedSplit):
        if len(train) < k + 1:
            raise ValueError(f"train split has {len(train)} examples, need at least k+1={k + 1}")
        train = prepare_split(model, index, train, k, training=True)
    if not isinstance(valid, PreparedSplit):
        valid = prepare_split(model, index, valid, k, training=False)
    if len(train) < k + 1:
        raise ValueError(f"train split has {len(train)} examples, need at least k+1={k + 1}")

    rng = np.random.default_rng(seed)
    params = AdapterParams.init(model.embedding_dim, k, d_proj, seed=int(rng.integers(2**32)))
    opt = AdamState(lr=lr)
    tensors = params.tensors()
    best, best_value = params.snapshot(), None
    loss_fn = cls_loss_batch if task.is_classification else reg_loss_batch
    for epoch in range(m2):
        order = rng.permutation(len(train))
        step_lr = lr_at(epoch, lr)
        total = 0.0
        for s in range(0, len(order), batch_size):
            idx = order[s:s + batch_size]
            if on_retrieval is not None:
                on_retrieval(train.ids[idx], train.r_ids[idx])
            ad.current_tape().clear()
            attn = attention_batch(params, train.emb[idx], train.r_emb[idx])
            loss = loss_fn(attn, train.base[idx], train.r_labels[idx], train.targets[idx])
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite adapter loss at epoch {epoch}, step {s // batch_size}")
            ad.backward(loss)
            adam_step(opt, tensors, lr=step_lr)
            total += loss.item() * len(idx)
        value = split_metric(params, valid, task)
        improved = is_better(task.metric, value, best_value)
        if improved:
            best, best_value = params.snapshot(), value
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "loss": total / len(train), "valid": value, "best": improved})
    return AdapterParams.from_arrays(best)
