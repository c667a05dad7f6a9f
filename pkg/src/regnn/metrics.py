"""Accuracy, ROC-AUC, MAE and the long-tail dissection reports."""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

DEFAULT_BOUNDARIES = (100, 500, 1000, 5000)
DEFAULT_EDGES = (0.0, 10.0, 20.0, 30.0)


def _pair(a, b, what: str) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"{what}: inputs must be 1-d and of equal length")
    if a.size == 0:
        raise ValueError(f"{what}: empty input")
    return a, b


def accuracy(preds, labels) -> float:
    preds, labels = _pair(preds, labels, "accuracy")
    return float(np.mean(preds == labels))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form of ROC-AUC: ties between a positive and a negative count 1/2."""
    scores, labels = _pair(scores, labels, "roc_auc")
    labels = labels.astype(np.int64)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("roc_auc: both classes must be present")
    ranks = rankdata(np.asarray(scores, dtype=np.float64), method="average")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def mae(preds, targets) -> float:
    preds, targets = _pair(preds, targets, "mae")
    return float(np.mean(np.abs(preds.astype(np.float64) - targets.astype(np.float64))))


HIGHER_IS_BETTER = {"accuracy": True, "roc_auc": True, "mae": False}


def headline(metric: str, preds, labels) -> float:
    return {"accuracy": accuracy, "roc_auc": roc_auc, "mae": mae}[metric](preds, labels)


def is_better(metric: str, new: float, old: float | None) -> bool:
    if old is None:
        return True
    return new > old if HIGHER_IS_BETTER[metric] else new < old


@dataclass
class GroupResult:
    label: str
    count: int
    value: float | None


@dataclass
class MetricsReport:
    metric: str
    value: float
    groups: list[GroupResult] = field(default_factory=list)
    seeds: int = 1
    mean: float | None = None
    std: float | None = None

    def group(self, label: str) -> GroupResult:
        for g in self.groups:
            if g.label == label:
                return g
        raise KeyError(label)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        groups = [GroupResult(**g) for g in d.get("groups", [])]
        return cls(d["metric"], d["value"], groups, d.get("seeds", 1), d.get("mean"), d.get("std"))

    @classmethod
    def from_json(cls, text: str) -> "MetricsReport":
        return cls.from_dict(json.loads(text))


def group_labels(boundaries: Sequence[float]) -> list[str]:
    b = list(boundaries)
    labels = [f"<{b[0]:g}"]
    labels += [f"{lo:g}-{hi:g}" for lo, hi in zip(b, b[1:])]
    labels.append(f">={b[-1]:g}")
    return labels


def _check_increasing(values: Sequence[float], what: str) -> None:
    if len(values) == 0 or any(b <= a for a, b in zip(values, values[1:])):
        raise ValueError(f"{what} must be nonempty and strictly increasing")


def longtail_class_report(preds, labels, train_class_counts: dict[int, int],
                          boundaries: Sequence[float] = DEFAULT_BOUNDARIES) -> MetricsReport:
    """Accuracy per group of classes, grouped by training-set frequency."""
    _check_increasing(boundaries, "boundaries")
    preds, labels = _pair(preds, labels, "longtail_class_report")
    names = group_labels(boundaries)
    group_of = np.empty(len(labels), dtype=np.int64)
    for i, lab in enumerate(labels):
        lab = int(lab)
        if lab not in train_class_counts:
            raise ValueError(f"class {lab} has no training count")
        group_of[i] = bisect.bisect_right(boundaries, train_class_counts[lab])
    groups = []
    for gi, name in enumerate(names):
        mask = group_of == gi
        n = int(mask.sum())
        groups.append(GroupResult(name, n, accuracy(preds[mask], labels[mask]) if n else None))
    return MetricsReport("accuracy", accuracy(preds, labels), groups)


def bucket_labels(edges: Sequence[float]) -> list[str]:
    e = list(edges)
    labels = [f"[{lo:g},{hi:g})" for lo, hi in zip(e, e[1:])]
    labels.append(f"[{e[-1]:g},inf)")
    return labels


def value_bucket_report(preds, targets, edges: Sequence[float] = DEFAULT_EDGES) -> MetricsReport:
    """MAE per target-value bucket [e0,e1), ..., [en,inf).

    Targets below e0 land in an extra leading bucket, listed only when used.
    """
    _check_increasing(edges, "edges")
    preds, targets = _pair(preds, targets, "value_bucket_report")
    preds = preds.astype(np.float64)
    targets = targets.astype(np.float64)
    idx = np.searchsorted(np.asarray(edges, dtype=np.float64), targets, side="right") - 1
    groups = []
    below = idx < 0
    if below.any():
        groups.append(GroupResult(f"<{edges[0]:g}", int(below.sum()), mae(preds[below], targets[below])))
    for bi, name in enumerate(bucket_labels(edges)):
        mask = idx == bi
        n = int(mask.sum())
        groups.append(GroupResult(name, n, mae(preds[mask], targets[mask]) if n else None))
    return MetricsReport("mae", mae(preds, targets), groups)


def aggregate(reports: Sequence[MetricsReport]) -> MetricsReport:
    """Mean/std of headline and per-group values across seeds."""
    if not reports:
        raise ValueError("nothing to aggregate")
    values = np.array([r.value for r in reports])
    groups = []
    for gi, g in enumerate(reports[0].groups):
        vals = [r.groups[gi].value for r in reports if r.groups[gi].value is not None]
        groups.append(GroupResult(g.label, g.count, float(np.mean(vals)) if vals else None))
    mean = float(values.mean())
    return MetricsReport(reports[0].metric, mean, groups, len(reports), mean, float(values.std()))


def render_table(report: MetricsReport) -> str:
    """Plain-text rendering for the ``report`` command."""
    lines = [f"{report.metric}: {report.value:.4f}"]
    if report.seeds > 1 and report.std is not None:
        lines[0] += f"  (mean over {report.seeds} seeds, std {report.std:.4f})"
    if report.groups:
        width = max(len(g.label) for g in report.groups)
        lines.append(f"{'group':<{width}}  {'count':>6}  {'value':>8}")
        for g in report.groups:
            val = "-" if g.value is None or (isinstance(g.value, float) and math.isnan(g.value)) else f"{g.value:.4f}"
            lines.append(f"{g.label:<{width}}  {g.count:>6}  {val:>8}")
    return "\n".join(lines)
