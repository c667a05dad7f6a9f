"""Graph, example and dataset containers plus the JSONL on-disk format.

A dataset file holds one example per line::

    {"graphs": [{"num_nodes": N, "edges": [[u, v], ...], "node_feat": [[...], ...],
                 "edge_feat": [[...], ...]}], "label": 0, "split": "train"}

``edge_feat`` is optional. The task kind lives in a TOML sidecar next to the
file (``data.jsonl`` -> ``data.toml``) with keys ``task`` and, for multiclass,
``num_classes``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
import tomli

Label = Union[int, float]
SPLITS = ("train", "valid", "test")
TASK_KINDS = ("binary", "multiclass", "regression")


class DatasetError(ValueError):
    """Raised for malformed or inconsistent dataset content."""


class Graph:
    """Undirected graph with node features and optional edge features.

    Each unordered edge is stored once; self-loops are rejected.
    """

    __slots__ = ("num_nodes", "edges", "node_feat", "edge_feat")

    def __init__(self, num_nodes: int, edges, node_feat, edge_feat=None):
        self.num_nodes = int(num_nodes)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        self.node_feat = np.asarray(node_feat, dtype=np.float64)
        self.edge_feat = None if edge_feat is None else np.asarray(edge_feat, dtype=np.float64)
        self._validate()

    def _validate(self) -> None:
        if self.num_nodes < 1:
            raise DatasetError("graph must have at least one node")
        if self.node_feat.ndim != 2 or self.node_feat.shape[0] != self.num_nodes:
            raise DatasetError(
                f"node_feat must have {self.num_nodes} rows, got shape {self.node_feat.shape}")
        e = self.edges
        if e.size:
            if e.min() < 0 or e.max() >= self.num_nodes:
                raise DatasetError("edge endpoint out of range")
            if np.any(e[:, 0] == e[:, 1]):
                raise DatasetError("self-loop edges are not allowed")
            canon = np.sort(e, axis=1)
            if len(np.unique(canon, axis=0)) != len(canon):
                raise DatasetError("duplicate edge")
        if self.edge_feat is not None:
            if len(e) == 0 and self.edge_feat.size == 0:
                # JSON "[]" carries no width; keep it unknown
                width = self.edge_feat.shape[1] if self.edge_feat.ndim == 2 else 0
                self.edge_feat = np.zeros((0, width))
            elif self.edge_feat.ndim != 2 or self.edge_feat.shape[0] != len(e):
                raise DatasetError(
                    f"edge_feat must have {len(e)} rows, got shape {self.edge_feat.shape}")

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def d_v(self) -> int:
        return self.node_feat.shape[1]

    @property
    def d_e(self) -> int | None:
        """Edge-feature width; None without edge features or when no edge fixes it."""
        if self.edge_feat is None or (self.num_edges == 0 and self.edge_feat.shape[1] == 0):
            return None
        return self.edge_feat.shape[1]

    @property
    def has_edge_feat(self) -> bool:
        return self.edge_feat is not None

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_nodes, self.num_nodes))
        if self.num_edges:
            a[self.edges[:, 0], self.edges[:, 1]] = 1.0
            a[self.edges[:, 1], self.edges[:, 0]] = 1.0
        return a

    def permuted(self, perm: Sequence[int]) -> "Graph":
        """Relabel nodes so that old node ``perm[i]`` becomes new node ``i``."""
        perm = np.asarray(perm)
        inv = np.empty_like(perm)
        inv[perm] = np.arange(len(perm))
        return Graph(self.num_nodes, inv[self.edges] if self.num_edges else self.edges,
                     self.node_feat[perm], self.edge_feat)

    def to_json(self) -> dict:
        out = {
            "num_nodes": self.num_nodes,
            "edges": self.edges.tolist(),
            "node_feat": self.node_feat.tolist(),
        }
        if self.edge_feat is not None:
            out["edge_feat"] = self.edge_feat.tolist()
        return out

    def __eq__(self, other) -> bool:
        if not isinstance(other, Graph):
            return NotImplemented
        same_ef = (self.edge_feat is None and other.edge_feat is None) or (
            self.edge_feat is not None and other.edge_feat is not None
            and (self.num_edges == 0 or np.array_equal(self.edge_feat, other.edge_feat)))
        return (self.num_nodes == other.num_nodes and np.array_equal(self.edges, other.edges)
                and np.array_equal(self.node_feat, other.node_feat) and same_ef)

    def __repr__(self) -> str:
        return f"Graph(num_nodes={self.num_nodes}, num_edges={self.num_edges}, d_v={self.d_v})"


def _feature_signatures(graphs: Iterable[Graph]) -> set[tuple]:
    sigs = {(g.d_v, g.has_edge_feat) for g in graphs}
    widths = {g.d_e for g in graphs if g.d_e is not None}
    return {s + (w,) for s in sigs for w in (widths or {None})}


@dataclass(frozen=True)
class Example:
    graphs: tuple[Graph, ...]
    label: Label
    id: int

    def __post_init__(self):
        if not self.graphs:
            raise DatasetError("example needs at least one graph")
        if len(_feature_signatures(self.graphs)) > 1:
            raise DatasetError("graphs within an example disagree on feature dimensions")


@dataclass(frozen=True)
class Task:
    kind: str
    num_classes: int | None = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DatasetError(f"unknown task kind {self.kind!r}")
        if self.kind == "binary":
            object.__setattr__(self, "num_classes", 2)
        elif self.kind == "multiclass":
            if self.num_classes is None or self.num_classes < 2:
                raise DatasetError("multiclass task needs num_classes >= 2")
        else:
            object.__setattr__(self, "num_classes", None)

    @property
    def is_classification(self) -> bool:
        return self.kind != "regression"

    @property
    def output_dim(self) -> int:
        return 1 if self.num_classes is None else self.num_classes

    @property
    def metric(self) -> str:
        return {"binary": "roc_auc", "multiclass": "accuracy", "regression": "mae"}[self.kind]

    def check_label(self, label, where: str = "") -> Label:
        if self.is_classification:
            if isinstance(label, bool) or not isinstance(label, (int, np.integer)):
                raise DatasetError(f"{where}class label must be an integer, got {label!r}")
            if not 0 <= label < self.num_classes:
                raise DatasetError(f"{where}class label {label} outside [0, {self.num_classes})")
            return int(label)
        if isinstance(label, bool) or not isinstance(label, (int, float, np.integer, np.floating)):
            raise DatasetError(f"{where}regression label must be a number, got {label!r}")
        if not np.isfinite(label):
            raise DatasetError(f"{where}regression label must be finite")
        return float(label)


@dataclass(frozen=True, eq=False)
class Dataset:
    task: Task
    train: tuple[Example, ...]
    valid: tuple[Example, ...]
    test: tuple[Example, ...]

    def __post_init__(self):
        if not self.train:
            raise DatasetError("empty train split")
        all_ex = self.train + self.valid + self.test
        ids = [ex.id for ex in all_ex]
        if len(set(ids)) != len(ids):
            raise DatasetError("example ids must be unique across splits")
        n_graphs = len(all_ex[0].graphs)
        for ex in all_ex:
            if len(ex.graphs) != n_graphs:
                raise DatasetError(f"example {ex.id}: has {len(ex.graphs)} graphs, expected {n_graphs}")
            self.task.check_label(ex.label, f"example {ex.id}: ")
        if len(_feature_signatures(g for ex in all_ex for g in ex.graphs)) > 1:
            raise DatasetError("examples disagree on feature dimensions")

    @property
    def d_v(self) -> int:
        return self.train[0].graphs[0].d_v

    @property
    def d_e(self) -> int | None:
        """Edge-feature width, or None when the dataset carries no edge features."""
        for ex in self.train + self.valid + self.test:
            for g in ex.graphs:
                if g.d_e is not None:
                    return g.d_e
        return None

    @property
    def graphs_per_example(self) -> int:
        return len(self.train[0].graphs)

    def split(self, name: str) -> tuple[Example, ...]:
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return getattr(self, name)

    def class_counts(self, split: str = "train") -> dict[int, int]:
        counts: dict[int, int] = {}
        for ex in self.split(split):
            counts[ex.label] = counts.get(ex.label, 0) + 1
        return dict(sorted(counts.items()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return self.task == other.task and all(
            _same_examples(self.split(s), other.split(s)) for s in SPLITS)


def _same_examples(a: Sequence[Example], b: Sequence[Example]) -> bool:
    return len(a) == len(b) and all(
        x.id == y.id and x.label == y.label and type(x.label) is type(y.label)
        and len(x.graphs) == len(y.graphs) and all(g == h for g, h in zip(x.graphs, y.graphs))
        for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# JSONL


def sidecar_path(path: Path | str) -> Path:
    return Path(path).with_suffix(".toml")


def read_task(path: Path | str) -> Task:
    cfg_path = sidecar_path(path)
    if not cfg_path.exists():
        raise DatasetError(f"missing task config {cfg_path}")
    with open(cfg_path, "rb") as fh:
        cfg = tomli.load(fh)
    if "task" not in cfg:
        raise DatasetError(f"{cfg_path}: missing key 'task'")
    return Task(cfg["task"], cfg.get("num_classes"))


def _parse_graph(obj) -> Graph:
    if not isinstance(obj, dict):
        raise DatasetError("graph must be a JSON object")
    for key in ("num_nodes", "edges", "node_feat"):
        if key not in obj:
            raise DatasetError(f"graph missing key {key!r}")
    return Graph(obj["num_nodes"], obj["edges"], obj["node_feat"], obj.get("edge_feat"))


def load_jsonl(path: Path | str, task: Task | None = None) -> Dataset:
    """Read a dataset file; ``task`` overrides the sidecar config.

    Example ids are zero-based record positions in file order. Errors carry
    the 1-based line number.
    """
    path = Path(path)
    if task is None:
        task = read_task(path)
    splits: dict[str, list[Example]] = {s: [] for s in SPLITS}
    next_id = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            where = f"{path}:{lineno}: "
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{where}malformed JSON ({exc.msg})") from None
            try:
                if not isinstance(rec, dict) or "graphs" not in rec or "label" not in rec:
                    raise DatasetError("record needs 'graphs' and 'label'")
                split = rec.get("split")
                if split not in SPLITS:
                    raise DatasetError(f"unknown split tag {split!r}")
                graphs = tuple(_parse_graph(g) for g in rec["graphs"])
                label = task.check_label(rec["label"])
                splits[split].append(Example(graphs, label, next_id))
            except DatasetError as exc:
                raise DatasetError(f"{where}{exc}") from None
            except (TypeError, ValueError) as exc:
                raise DatasetError(f"{where}{exc}") from None
            next_id += 1
    return Dataset(task, *(tuple(splits[s]) for s in SPLITS))


def iter_records(dataset: Dataset) -> Iterable[dict]:
    tagged = [(ex, s) for s in SPLITS for ex in dataset.split(s)]
    for ex, s in sorted(tagged, key=lambda p: p[0].id):
        yield {"graphs": [g.to_json() for g in ex.graphs], "label": ex.label, "split": s}


def dumps_jsonl(dataset: Dataset) -> str:
    return "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in iter_records(dataset))


def write_jsonl(dataset: Dataset, path: Path | str) -> None:
    """Write the dataset and its sidecar. Records are ordered by example id."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps_jsonl(dataset), encoding="utf-8")
    lines = [f'task = "{dataset.task.kind}"']
    if dataset.task.kind == "multiclass":
        lines.append(f"num_classes = {dataset.task.num_classes}")
    sidecar_path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
