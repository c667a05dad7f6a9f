"""Two-phase training, retrieval baselines, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import tomli

from . import autodiff as ad
from .adapter import (AdapterParams, PreparedSplit, point_predictions, predict_split,
                      prepare_split, train_adapter)
from .gnn import GnnConfig, GraphBatch, ModelParams, encode_batch, infer, phase1_loss, task_head
from .graph import Dataset, Example, Task, load_jsonl
from .index import FlatIndex, similarity
from .metrics import (DEFAULT_BOUNDARIES, DEFAULT_EDGES, MetricsReport, aggregate, headline,
                      is_better, longtail_class_report, value_bucket_report)
from .optim import AdamState, adam_step, lr_at

log = logging.getLogger(__name__)

MODES = ("base", "enhanced", "averaging")
CKPT_MAGIC = b"GRCK1\x00"
CKPT_VERSION = 1
INDEX_FILE = "index.grix"
MODEL_FILE = "model.ckpt"


@dataclass(frozen=True)
class RunConfig:
    dataset: str = ""
    model: GnnConfig = field(default_factory=GnnConfig)
    m1: int = 300
    m2: int = 200
    k: int = 3
    batch_size: int = 32
    lr: float = 0.01
    seeds: int = 5
    seed: int = 0
    d_proj: int | None = None
    boundaries: tuple[float, ...] = DEFAULT_BOUNDARIES
    edges: tuple[float, ...] = DEFAULT_EDGES
    task: str | None = None
    num_classes: int | None = None

    def __post_init__(self):
        if self.m1 < 1 or self.m2 < 1:
            raise ValueError("m1 and m2 must be >= 1")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.seeds < 1 or self.batch_size < 1:
            raise ValueError("seeds and batch_size must be >= 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["boundaries"] = list(self.boundaries)
        d["edges"] = list(self.edges)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "model" in d:
            d["model"] = GnnConfig(**d["model"])
        for key in ("boundaries", "edges"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def adapter_seed(self, i: int) -> int:
        return 1000 * self.seed + i

    def load_task_override(self) -> Task | None:
        return None if self.task is None else Task(self.task, self.num_classes)


def load_config(path: Path | str, **overrides) -> RunConfig:
    """Read a TOML run config; a relative dataset path resolves against the config's folder."""
    path = Path(path)
    with open(path, "rb") as fh:
        raw = tomli.load(fh)
    if raw.get("dataset"):
        ds = Path(raw["dataset"])
        raw["dataset"] = str(ds if ds.is_absolute() else (path.parent / ds).resolve())
    raw.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_dict(raw)


def load_dataset(config: RunConfig) -> Dataset:
    return load_jsonl(config.dataset, config.load_task_override())


# ---------------------------------------------------------------------------
# phase 1


def model_metric(model: ModelParams, examples: Sequence[Example]) -> float:
    _, out = infer(model, examples)
    labels = np.array([ex.label for ex in examples])
    return headline(model.task.metric, point_predictions(model.task, out), labels)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    chunks = [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    # batch norm in training mode needs at least two rows
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


def train_gnn(config: RunConfig, dataset: Dataset, on_epoch=None) -> ModelParams:
    """Supervised training for m1 epochs; returns the best-on-validation parameters."""
    model = ModelParams.init(config.model, dataset.task, dataset.d_v, dataset.d_e,
                             dataset.graphs_per_example, seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])
    opt = AdamState(lr=config.lr)
    trainable = model.trainable()
    train = dataset.train
    valid = dataset.valid if dataset.valid else dataset.train
    labels = np.array([ex.label for ex in train])
    best, best_value = model.snapshot(), None
    for epoch in range(config.m1):
        step_lr = lr_at(epoch, config.lr)
        total = 0.0
        for step, idx in enumerate(_batches(rng.permutation(len(train)), config.batch_size)):
            batch = GraphBatch.from_examples([train[i] for i in idx])
            ad.current_tape().clear()
            pred = task_head(encode_batch(model, batch, training=True), model)
            loss = phase1_loss(pred, labels[idx], dataset.task)
            if not np.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite loss at epoch {epoch}, step {step}")
            ad.backward(loss)
            adam_step(opt, trainable, lr=step_lr)
            total += loss.item() * len(idx)
        value = model_metric(model, valid)
        improved = is_better(dataset.task.metric, value, best_value)
        if improved:
            best, best_value = model.snapshot(), value
        if on_epoch is not None:
            on_epoch({"epoch": epoch, "loss": total / len(train), "valid": value, "best": improved})
        log.debug("phase1 epoch %d loss %.4f valid %.4f", epoch, total / len(train), value)
    model.load_arrays(best)
    return model


def build_index(model: ModelParams, examples: Sequence[Example]) -> FlatIndex:
    """Index eval-mode embeddings of ``examples`` keyed to (id, label)."""
    emb, _ = infer(model, examples)
    log.info("index built over %d examples (dim %d)", len(examples), emb.shape[1])
    return FlatIndex(emb, [ex.id for ex in examples], [ex.label for ex in examples])


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    config: RunConfig
    model: ModelParams
    adapter: AdapterParams | None = None
    index_file: str | None = None
    seed: int = 0
    version: int = CKPT_VERSION

    def _arrays(self) -> dict[str, np.ndarray]:
        out = {"model/" + k: v for k, v in self.model.arrays().items()}
        if self.adapter is not None:
            out.update({"adapter/" + k: v for k, v in self.adapter.arrays().items()})
        return out

    def to_bytes(self) -> bytes:
        arrays = self._arrays()
        m = self.model
        header = {
            "format_version": self.version,
            "config": self.config.to_dict(),
            "task": {"kind": m.task.kind, "num_classes": m.task.num_classes},
            "model": {"d_v": m.d_v, "d_e": m.d_e, "graphs_per_example": m.graphs_per_example},
            "index_file": self.index_file,
            "seed": self.seed,
            "arrays": [{"name": k, "shape": list(v.shape)} for k, v in arrays.items()],
        }
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
        parts = [CKPT_MAGIC, struct.pack("<II", self.version, len(blob)), blob]
        parts += [np.ascontiguousarray(v, dtype="<f8").tobytes() for v in arrays.values()]
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Checkpoint":
        if data[: len(CKPT_MAGIC)] != CKPT_MAGIC:
            raise ValueError("bad magic: not a checkpoint file")
        off = len(CKPT_MAGIC)
        version, hlen = struct.unpack_from("<II", data, off)
        if version != CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        off += 8
        header = json.loads(data[off:off + hlen])
        off += hlen
        arrays = {}
        for spec in header["arrays"]:
            n = int(np.prod(spec["shape"], dtype=np.int64))
            if len(data) < off + 8 * n:
                raise ValueError("truncated checkpoint")
            arrays[spec["name"]] = np.frombuffer(data, "<f8", n, off).reshape(spec["shape"]).astype(np.float64)
            off += 8 * n
        if off != len(data):
            raise ValueError("trailing bytes in checkpoint")
        config = RunConfig.from_dict(header["config"])
        t, mm = header["task"], header["model"]
        model = ModelParams.init(config.model, Task(t["kind"], t["num_classes"]), mm["d_v"], mm["d_e"],
                                 mm["graphs_per_example"])
        model.load_arrays({k[6:]: v for k, v in arrays.items() if k.startswith("model/")})
        adapter_arrays = {k[8:]: v for k, v in arrays.items() if k.startswith("adapter/")}
        adapter = AdapterParams.from_arrays(adapter_arrays) if adapter_arrays else None
        return cls(config, model, adapter, header["index_file"], header["seed"], version)

    def save(self, path: Path | str) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: Path | str) -> "Checkpoint":
        return cls.from_bytes(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# evaluation


def _report(task: Task, out: np.ndarray, targets: np.ndarray, train_counts: dict[int, int],
            config: RunConfig) -> MetricsReport:
    preds = point_predictions(task, out)
    if task.kind == "multiclass":
        report = longtail_class_report(preds, targets, train_counts, config.boundaries)
    elif task.kind == "regression":
        report = value_bucket_report(preds, targets, config.edges)
    else:
        return MetricsReport(task.metric, headline(task.metric, preds, targets))
    report.value = headline(task.metric, preds, targets)
    return report


def evaluate_prepared(model: ModelParams, adapter: AdapterParams | None, prep: PreparedSplit,
                      mode: str, train_counts: dict[int, int], config: RunConfig) -> MetricsReport:
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "base":
        out = prep.base
    elif mode == "enhanced":
        if adapter is None:
            raise ValueError("adapter missing: run train-adapter first")
        _, out = predict_split(adapter, prep, model.task)
    else:
        _, out = predict_split(None, prep, model.task)
    return _report(model.task, out, prep.targets, train_counts, config)


def evaluate(checkpoint: Checkpoint, examples: Sequence[Example], mode: str,
             train_counts: dict[int, int], index: FlatIndex | None = None) -> MetricsReport:
    """Score ``examples`` with the base head, the adapter, or uniform averaging."""
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    model, config = checkpoint.model, checkpoint.config
    if mode == "base":
        _, out = infer(model, examples)
        targets = np.array([ex.label for ex in examples])
        return _report(model.task, out, targets, train_counts, config)
    if mode == "enhanced" and checkpoint.adapter is None:
        raise ValueError("adapter missing: run train-adapter first")
    if index is None:
        raise ValueError("index missing: run build-index first")
    prep = prepare_split(model, index, examples, config.k, training=False)
    return evaluate_prepared(model, checkpoint.adapter, prep, mode, train_counts, config)


# ---------------------------------------------------------------------------
# retrieval-only baselines


def majority_vote(labels: Sequence, distances: Sequence[float]) -> tuple:
    """Modal label among neighbors sorted by distance, and its best similarity.

    Ties go to the label whose nearest supporting neighbor comes first.
    """
    counts: dict = {}
    first: dict = {}
    for pos, lab in enumerate(labels):
        counts[lab] = counts.get(lab, 0) + 1
        first.setdefault(lab, pos)
    top = max(counts.values())
    winner = min((lab for lab, c in counts.items() if c == top), key=lambda lab: first[lab])
    return winner, similarity(distances[first[winner]])


def _baseline_outputs(index: FlatIndex, emb: np.ndarray, n: int, task: Task) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    if n > len(index):
        raise ValueError(f"n={n} exceeds index size {len(index)}")
    pos, dist = index.search_batch(emb, n)
    labels = index.labels[pos]
    if task.kind == "regression":
        return labels.mean(axis=1)
    out = []
    for lab_row, d_row in zip(labels, dist):
        lab, sim = majority_vote([int(x) for x in lab_row], d_row)
        if task.kind == "binary":
            out.append(sim if lab == 1 else 1.0 - sim)
        else:
            out.append(lab)
    return np.array(out)


def baseline_majority(index: FlatIndex, model: ModelParams, examples: Sequence[Example], n: int,
                      train_counts: dict[int, int] | None = None,
                      config: RunConfig | None = None) -> MetricsReport:
    """Predict the most frequent label among the n nearest training graphs.

    Binary tasks score each query by the best similarity of the winning label,
    mapped to s for label 1 and 1 - s for label 0. Regression uses the mean
    neighbor value.
    """
    if len(index) == 0:
        raise ValueError("empty index")
    emb, _ = infer(model, examples)
    out = _baseline_outputs(index, emb, n, model.task)
    targets = np.array([ex.label for ex in examples])
    config = config or RunConfig()
    task = model.task
    if task.kind == "multiclass":
        counts = train_counts or {int(c): int(np.sum(index.labels == c)) for c in np.unique(index.labels)}
        return longtail_class_report(out, targets, counts, config.boundaries)
    if task.kind == "regression":
        report = value_bucket_report(out, targets, config.edges)
        return report
    return MetricsReport(task.metric, headline(task.metric, out, targets))


def baseline_retrieval(index: FlatIndex, model: ModelParams, examples: Sequence[Example],
                       train_counts: dict[int, int] | None = None,
                       config: RunConfig | None = None) -> MetricsReport:
    """Label of the single nearest training graph."""
    return baseline_majority(index, model, examples, 1, train_counts, config)


# ---------------------------------------------------------------------------
# the whole pipeline


@dataclass
class RunResult:
    model: ModelParams
    index: FlatIndex
    adapters: list[AdapterParams]
    reports: dict[str, list[MetricsReport]]
    aggregates: dict[str, MetricsReport]
    model_checksum: str
    dropout_violations: int = 0
    index_builds: int = 0
    checkpoints: list[Path] = field(default_factory=list)


class DropoutMonitor:
    """Counts retrieval sets that contain their own query id."""

    def __init__(self):
        self.violations = 0
        self.checked = 0

    def __call__(self, query_ids: np.ndarray, retrieved_ids: np.ndarray) -> None:
        self.checked += len(query_ids)
        self.violations += int(np.any(retrieved_ids == query_ids[:, None], axis=1).sum())


def _write_json(path: Path, report: MetricsReport) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json() + "\n", encoding="utf-8")


def train_two_phase(config: RunConfig, dataset: Dataset | None = None, out_dir: Path | str | None = None,
                    split: str = "test", modes: Sequence[str] = MODES,
                    index_transform: Callable[[FlatIndex], FlatIndex] | None = None) -> RunResult:
    """Phase 1, one index build, then phase 2 repeated for ``config.seeds`` seeds.

    With ``out_dir`` set, writes model.ckpt, index.grix, one checkpoint per
    adapter seed and metrics/{mode}_seed{i}.json plus {mode}_aggregate.json.
    ``index_transform`` rewrites the index before phase 2 (label-noise experiments).
    """
    if dataset is None:
        dataset = load_dataset(config)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    model = train_gnn(config, dataset)
    index = build_index(model, dataset.train)
    index_builds = 1
    if index_transform is not None:
        index = index_transform(index)
    checksum = model.checksum()
    ckpts = []
    if out is not None:
        index.save(out / INDEX_FILE)
        Checkpoint(config, model, None, INDEX_FILE, config.seed).save(out / MODEL_FILE)
        ckpts.append(out / MODEL_FILE)

    k = config.k
    train_prep = prepare_split(model, index, dataset.train, k, training=True)
    valid_examples = dataset.valid if dataset.valid else dataset.train
    valid_prep = prepare_split(model, index, valid_examples, k, training=False)
    eval_prep = prepare_split(model, index, dataset.split(split), k, training=False)
    train_counts = dataset.class_counts("train") if dataset.task.is_classification else {}

    monitor = DropoutMonitor()
    adapters: list[AdapterParams] = []
    reports: dict[str, list[MetricsReport]] = {m: [] for m in modes}
    for i in range(config.seeds):
        seed = config.adapter_seed(i)
        adapter = train_adapter(model, index, train_prep, valid_prep, config.m2, k, seed,
                                lr=config.lr, batch_size=config.batch_size, d_proj=config.d_proj,
                                on_retrieval=monitor)
        if model.checksum() != checksum:
            raise RuntimeError("phase 2 modified the frozen model")
        adapters.append(adapter)
        for mode in modes:
            rep = evaluate_prepared(model, adapter, eval_prep, mode, train_counts, config)
            reports[mode].append(rep)
            if out is not None:
                _write_json(out / "metrics" / f"{mode}_seed{i}.json", rep)
        if out is not None:
            path = out / f"adapter_seed{i}.ckpt"
            Checkpoint(config, model, adapter, INDEX_FILE, seed).save(path)
            ckpts.append(path)
    if monitor.violations:
        raise RuntimeError(f"retrieval dropout violated {monitor.violations} times")
    aggregates = {m: aggregate(r) for m, r in reports.items()}
    if out is not None:
        for mode, rep in aggregates.items():
            _write_json(out / "metrics" / f"{mode}_aggregate.json", rep)
    log.info("run complete: index builds=%d, dropout checks=%d, violations=%d",
             index_builds, monitor.checked, monitor.violations)
    return RunResult(model, index, adapters, reports, aggregates, checksum,
                     monitor.violations, index_builds, ckpts)


def with_overrides(config: RunConfig, **kw) -> RunConfig:
    return replace(config, **{k: v for k, v in kw.items() if v is not None})
