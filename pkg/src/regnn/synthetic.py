"""Seeded synthetic corpora with long-tailed label distributions.

``gen_longtail_motif`` plants one typed subgraph motif per class inside random
noise; ``gen_longtail_regression`` produces targets that are a fixed function
of graph structure with exponentially rarer high-value ranges.
"""

from __future__ import annotations

import numpy as np

from .graph import Dataset, DatasetError, Example, Graph, Task

NUM_TYPES = 4
EDGE_TYPE_WEIGHTS = np.array([0.5, 1.0, 1.5, 2.0])
REGRESSION_EDGES = (0.0, 10.0, 20.0, 30.0)
REGRESSION_BUCKET_MASS = (0.62, 0.24, 0.09, 0.05)


def _one_hot(types: np.ndarray) -> np.ndarray:
    return np.eye(NUM_TYPES)[types]


def _random_connected(rng: np.random.Generator, n: int, extra: int) -> set[tuple[int, int]]:
    edges = {(int(rng.integers(0, v)), v) for v in range(1, n)}
    tries = 0
    while extra > 0 and tries < 20 * n:
        u, v = sorted(int(x) for x in rng.choice(n, size=2, replace=False))
        tries += 1
        if (u, v) not in edges:
            edges.add((u, v))
            extra -= 1
    return edges


def _wl_signature(types, edges, n: int, rounds: int = 3) -> tuple:
    adj = [[] for _ in range(n)]
    for u, v in edges:
        adj[u].append(v)
        adj[v].append(u)
    colors = [str(t) for t in types]
    for _ in range(rounds):
        colors = [c + "(" + ",".join(sorted(colors[u] for u in adj[v])) + ")"
                  for v, c in enumerate(colors)]
    return tuple(sorted(colors))


def motif_library(num_classes: int, seed: int, size: int = 5) -> list[tuple[np.ndarray, list[tuple[int, int]]]]:
    """One distinct typed motif (node types, edge list) per class."""
    rng = np.random.default_rng([seed, 0xA11CE])
    motifs, seen = [], set()
    while len(motifs) < num_classes:
        types = rng.integers(0, NUM_TYPES, size=size)
        edges = sorted(_random_connected(rng, size, extra=int(rng.integers(0, 3))))
        sig = _wl_signature(types, edges, size)
        if sig in seen:
            continue
        seen.add(sig)
        motifs.append((types, edges))
    return motifs


def _motif_graph(rng, motif, noise_range: tuple[int, int]) -> Graph:
    types, edges = motif
    m = len(types)
    k = int(rng.integers(noise_range[0], noise_range[1] + 1))
    all_types = np.concatenate([types, rng.integers(0, NUM_TYPES, size=k)])
    all_edges = set(edges)
    for v in range(m, m + k):
        all_edges.add((int(rng.integers(0, v)), v))
    n = m + k
    perm = rng.permutation(n)
    pos = np.empty(n, dtype=np.int64)
    pos[perm] = np.arange(n)
    relabeled = sorted(tuple(sorted((int(pos[u]), int(pos[v])))) for u, v in all_edges)
    return Graph(n, relabeled, _one_hot(all_types[perm]))


def gen_longtail_motif(num_classes: int, head_count: int, tail_count: int, tail_fraction: float,
                       seed: int, valid_per_class: int = 10, test_per_class: int = 20,
                       noise_range: tuple[int, int] = (3, 8)) -> Dataset:
    """Multiclass motif-classification corpus with a long-tailed train split.

    The last ``round(tail_fraction * num_classes)`` classes are tail classes
    with ``tail_count`` training examples; the rest get ``head_count``.
    Validation and test splits are class-balanced.
    """
    if num_classes < 2:
        raise DatasetError("num_classes must be >= 2")
    if not head_count > tail_count >= 1:
        raise DatasetError("need head_count > tail_count >= 1")
    if not 0.0 <= tail_fraction <= 1.0:
        raise DatasetError("tail_fraction must lie in [0, 1]")
    if valid_per_class < 1 or test_per_class < 1:
        raise DatasetError("valid and test splits must be nonempty")
    n_tail = int(round(tail_fraction * num_classes))
    per_class = [tail_count if c >= num_classes - n_tail else head_count for c in range(num_classes)]

    motifs = motif_library(num_classes, seed)
    rng = np.random.default_rng([seed, 0xD47A])
    next_id = 0
    splits = []
    for counts in (per_class, [valid_per_class] * num_classes, [test_per_class] * num_classes):
        labels = np.repeat(np.arange(num_classes), counts)
        labels = labels[rng.permutation(len(labels))]
        examples = []
        for label in labels:
            g = _motif_graph(rng, motifs[label], noise_range)
            examples.append(Example((g,), int(label), next_id))
            next_id += 1
        splits.append(tuple(examples))
    return Dataset(Task("multiclass", num_classes), *splits)


def tail_classes(num_classes: int, tail_fraction: float) -> list[int]:
    n_tail = int(round(tail_fraction * num_classes))
    return list(range(num_classes - n_tail, num_classes))


def structural_target(graph: Graph) -> float:
    """Sum over edges of the mean endpoint-type weight (types read from one-hot features)."""
    types = graph.node_feat.argmax(axis=1)
    w = EDGE_TYPE_WEIGHTS[types]
    if not graph.num_edges:
        return 0.0
    return float(((w[graph.edges[:, 0]] + w[graph.edges[:, 1]]) / 2.0).sum())


def _bucket_sizes(size: int) -> list[int]:
    raw = np.array(REGRESSION_BUCKET_MASS) * size
    counts = np.floor(raw).astype(int)
    for i in np.argsort(-(raw - counts), kind="stable")[: size - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


_NODE_RANGES = ((3, 8), (8, 15), (15, 22), (22, 32))


def _regression_graph(rng, bucket: int) -> Graph:
    lo = REGRESSION_EDGES[bucket]
    hi = REGRESSION_EDGES[bucket + 1] if bucket + 1 < len(REGRESSION_EDGES) else np.inf
    n_lo, n_hi = _NODE_RANGES[bucket]
    while True:
        n = int(rng.integers(n_lo, n_hi + 1))
        types = rng.integers(0, NUM_TYPES, size=n)
        edges = sorted(_random_connected(rng, n, extra=n // 4))
        g = Graph(n, edges, _one_hot(types))
        if lo <= structural_target(g) < hi:
            return g


def gen_longtail_regression(seed: int, size: int, valid_fraction: float = 0.1,
                            test_fraction: float = 0.1) -> Dataset:
    """Regression corpus; bucket masses over [0,10), [10,20), [20,30), [30,inf) decay geometrically."""
    if size < 100:
        raise DatasetError("size must be >= 100")
    rng = np.random.default_rng([seed, 0x5E6])
    buckets = np.repeat(np.arange(len(REGRESSION_BUCKET_MASS)), _bucket_sizes(size))
    buckets = buckets[rng.permutation(size)]
    examples = []
    for i, b in enumerate(buckets):
        g = _regression_graph(rng, int(b))
        examples.append(Example((g,), structural_target(g), i))
    n_valid = int(round(valid_fraction * size))
    n_test = int(round(test_fraction * size))
    n_train = size - n_valid - n_test
    return Dataset(Task("regression"), tuple(examples[:n_train]),
                   tuple(examples[n_train:n_train + n_valid]), tuple(examples[n_train + n_valid:]))
