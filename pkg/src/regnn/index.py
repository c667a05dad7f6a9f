"""Exact L2 top-k search over embedding keys with (example id, label) payloads.

On-disk layout, little-endian::

    b"GRIX1\\0"  u32 dim  u64 count
    count x [u64 example_id][u8 label_kind][u32 class | f64 value][dim x f64 key]

label_kind is 0 for a class index and 1 for a real value.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .graph import Label

MAGIC = b"GRIX1\x00"
_HEAD = struct.Struct("<IQ")
_ID_KIND = struct.Struct("<QB")
CLASS_KIND, VALUE_KIND = 0, 1


class IndexFormatError(ValueError):
    pass


def l2_distance(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.sqrt(np.sum((a - b) ** 2)))


def similarity(distance: float) -> float:
    """Bounded monotone similarity in (0, 1]."""
    return 1.0 / (1.0 + distance)


@dataclass(frozen=True)
class Hit:
    example_id: int
    label: Label
    distance: float
    key: np.ndarray

    @property
    def similarity(self) -> float:
        return similarity(self.distance)


class FlatIndex:
    """Insertion-ordered exact index. Immutable once built."""

    def __init__(self, keys: np.ndarray, ids: Sequence[int], labels: Sequence[Label]):
        keys = np.array(keys, dtype=np.float64)
        if keys.ndim != 2:
            raise ValueError("keys must be a 2-d matrix")
        if len(keys) == 0:
            raise ValueError("cannot build an empty index")
        if not (len(keys) == len(ids) == len(labels)):
            raise ValueError("keys and payloads differ in length")
        ids = np.asarray(ids, dtype=np.int64)
        if len(np.unique(ids)) != len(ids):
            raise ValueError("duplicate example_id")
        if np.any(ids < 0):
            raise ValueError("example ids must be nonnegative")
        kinds = {isinstance(lab, (int, np.integer)) and not isinstance(lab, bool) for lab in labels}
        if len(kinds) != 1:
            raise ValueError("labels must be all class indices or all real values")
        self.is_class = kinds.pop()
        self.keys = keys
        self.keys.flags.writeable = False
        self.ids = ids
        self.labels = np.asarray(labels, dtype=np.int64 if self.is_class else np.float64)
        self._sq = np.einsum("ij,ij->i", keys, keys)
        self._pos = {int(i): n for n, i in enumerate(ids)}

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return len(self.ids)

    def label_of(self, example_id: int) -> Label:
        lab = self.labels[self._pos[example_id]]
        return int(lab) if self.is_class else float(lab)

    def _distances(self, queries: np.ndarray) -> np.ndarray:
        diff = queries[:, None, :] - self.keys[None, :, :]
        return np.sqrt(np.einsum("qnd,qnd->qn", diff, diff))

    def search_batch(self, queries, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Positions (into insertion order) and distances, shape (q, min(k, n)).

        Rows are sorted by ascending distance, ties by smaller example id.
        """
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if queries.shape[1] != self.dim:
            raise ValueError(f"dimension mismatch: query dim {queries.shape[1]}, index dim {self.dim}")
        if k < 1:
            raise ValueError("k must be >= 1")
        k = min(k, len(self))
        pos_out = np.empty((len(queries), k), dtype=np.int64)
        dist_out = np.empty((len(queries), k))
        chunk = max(1, 2_000_000 // (len(self) * self.dim))
        for start in range(0, len(queries), chunk):
            d = self._distances(queries[start:start + chunk])
            for r, row in enumerate(d):
                order = np.lexsort((self.ids, row))[:k]
                pos_out[start + r] = order
                dist_out[start + r] = row[order]
        return pos_out, dist_out

    def search_topk(self, query, k: int) -> list[Hit]:
        pos, dist = self.search_batch(np.asarray(query, dtype=np.float64)[None, :], k)
        return [self.hit(p, d) for p, d in zip(pos[0], dist[0])]

    def hit(self, position: int, distance: float) -> Hit:
        lab = self.labels[position]
        return Hit(int(self.ids[position]), int(lab) if self.is_class else float(lab),
                   float(distance), self.keys[position])

    # -- persistence -------------------------------------------------------

    def to_bytes(self) -> bytes:
        parts = [MAGIC, _HEAD.pack(self.dim, len(self))]
        kind = CLASS_KIND if self.is_class else VALUE_KIND
        for i in range(len(self)):
            parts.append(_ID_KIND.pack(int(self.ids[i]), kind))
            if self.is_class:
                parts.append(struct.pack("<I", int(self.labels[i])))
            else:
                parts.append(struct.pack("<d", float(self.labels[i])))
            parts.append(self.keys[i].astype("<f8").tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes, expect_dim: int | None = None) -> "FlatIndex":
        if data[: len(MAGIC)] != MAGIC:
            raise IndexFormatError("bad magic: not an index file")
        off = len(MAGIC)
        if len(data) < off + _HEAD.size:
            raise IndexFormatError("truncated index header")
        dim, count = _HEAD.unpack_from(data, off)
        off += _HEAD.size
        if expect_dim is not None and dim != expect_dim:
            raise IndexFormatError(f"index dim {dim} does not match expected {expect_dim}")
        ids, labels = [], []
        keys = np.empty((count, dim))
        for i in range(count):
            if len(data) < off + _ID_KIND.size:
                raise IndexFormatError("truncated index record")
            eid, kind = _ID_KIND.unpack_from(data, off)
            off += _ID_KIND.size
            if kind == CLASS_KIND:
                fmt = "<I"
            elif kind == VALUE_KIND:
                fmt = "<d"
            else:
                raise IndexFormatError(f"unknown label kind {kind}")
            size = struct.calcsize(fmt) + 8 * dim
            if len(data) < off + size:
                raise IndexFormatError("truncated index record")
            (lab,) = struct.unpack_from(fmt, data, off)
            off += struct.calcsize(fmt)
            keys[i] = np.frombuffer(data, dtype="<f8", count=dim, offset=off)
            off += 8 * dim
            ids.append(eid)
            labels.append(int(lab) if kind == CLASS_KIND else float(lab))
        if off != len(data):
            raise IndexFormatError("trailing bytes after index records")
        return cls(keys, ids, labels)

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path | str, expect_dim: int | None = None) -> "FlatIndex":
        return cls.from_bytes(Path(path).read_bytes(), expect_dim)


def build(keys, payloads: Sequence[tuple[int, Label]]) -> FlatIndex:
    """Build from a key matrix and (example_id, label) payloads."""
    payloads = list(payloads)
    if len(payloads) == 0:
        raise ValueError("cannot build an empty index")
    ids = [p[0] for p in payloads]
    labels = [p[1] for p in payloads]
    return FlatIndex(keys, ids, labels)


def shuffle_labels(index: FlatIndex, fraction: float, seed: int) -> FlatIndex:
    """Copy of ``index`` with the labels of a random ``fraction`` of entries permuted among themselves."""
    if not 0.0 <= fraction <= 1.0:
        raise ValueError("fraction must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(len(index), size=int(round(fraction * len(index))), replace=False)
    labels = index.labels.copy()
    labels[chosen] = labels[rng.permutation(chosen)]
    cast = int if index.is_class else float
    return FlatIndex(index.keys, index.ids, [cast(x) for x in labels])


def search_topk(index: FlatIndex, query, k: int) -> list[Hit]:
    return index.search_topk(query, k)
