"""Command-line entry point: ``regnn <command> [flags]``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .adapter import prepare_split, train_adapter
from .gradcheck import run_suite
from .graph import write_jsonl
from .index import FlatIndex
from .metrics import MetricsReport, aggregate, render_table
from .pipeline import (INDEX_FILE, MODEL_FILE, MODES, Checkpoint, DropoutMonitor, RunConfig, _write_json,
                       baseline_majority, build_index, evaluate, evaluate_prepared, load_config, load_dataset,
                       train_gnn, train_two_phase, with_overrides)
from .synthetic import gen_longtail_motif, gen_longtail_regression

log = logging.getLogger("regnn")


class CliError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _require(path: Path, what: str, hint: str = "") -> Path:
    if not path.exists():
        raise CliError(f"{what} not found: {path}" + (f" ({hint})" if hint else ""))
    return path


def _run_dir(args) -> Path:
    if args.out is None:
        raise CliError("--out is required")
    return Path(args.out)


def _config(args) -> RunConfig:
    if args.config is None:
        raise CliError("--config is required")
    _require(Path(args.config), "config file (--config)")
    return load_config(args.config, seed=args.seed, k=getattr(args, "k", None),
                       boundaries=getattr(args, "boundaries", None), edges=getattr(args, "edges", None))


def _load_model(run: Path) -> Checkpoint:
    return Checkpoint.load(_require(run / MODEL_FILE, "model checkpoint", "run `train` first"))


def _load_index(run: Path, dim: int) -> FlatIndex:
    return FlatIndex.load(_require(run / INDEX_FILE, "index", "run `build-index` first"), expect_dim=dim)


def _adapter_paths(run: Path) -> list[Path]:
    return sorted(run.glob("adapter_seed*.ckpt"), key=lambda p: int(p.stem.removeprefix("adapter_seed")))


def _overrides(config: RunConfig, args) -> RunConfig:
    return with_overrides(config, k=getattr(args, "k", None), boundaries=getattr(args, "boundaries", None),
                          edges=getattr(args, "edges", None))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> None:
    if args.out is None:
        raise CliError("--out is required (path of the .jsonl file to write)")
    seed = 0 if args.seed is None else args.seed
    if args.kind == "motif":
        ds = gen_longtail_motif(args.num_classes, args.head, args.tail, args.tail_fraction, seed)
    else:
        ds = gen_longtail_regression(seed, args.size)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(ds, out)
    print(f"wrote {len(ds.train)}/{len(ds.valid)}/{len(ds.test)} train/valid/test examples to {out}")


def cmd_train(args) -> None:
    config = _config(args)
    run = _run_dir(args)
    run.mkdir(parents=True, exist_ok=True)
    dataset = load_dataset(config)
    model = train_gnn(config, dataset)
    Checkpoint(config, model, None, None, config.seed).save(run / MODEL_FILE)
    counts = dataset.class_counts("train") if dataset.task.is_classification else {}
    report = evaluate(Checkpoint(config, model), dataset.split(args.split), "base", counts)
    _write_json(run / "metrics" / f"base_{args.split}.json", report)
    print(render_table(report))


def cmd_build_index(args) -> None:
    run = _run_dir(args)
    ckpt = _load_model(run)
    dataset = load_dataset(ckpt.config)
    index = build_index(ckpt.model, dataset.train)
    index.save(run / INDEX_FILE)
    ckpt.index_file = INDEX_FILE
    ckpt.save(run / MODEL_FILE)
    print(f"index over {len(index)} training examples (dim {index.dim}) written to {run / INDEX_FILE}")


def cmd_train_adapter(args) -> None:
    run = _run_dir(args)
    ckpt = _load_model(run)
    config = _overrides(ckpt.config, args)
    if args.seed is not None:
        config = with_overrides(config, seed=args.seed)
    model = ckpt.model
    index = _load_index(run, model.embedding_dim)
    dataset = load_dataset(config)
    checksum = model.checksum()
    train = prepare_split(model, index, dataset.train, config.k, training=True)
    valid = prepare_split(model, index, dataset.valid or dataset.train, config.k, training=False)
    monitor = DropoutMonitor()
    for old in _adapter_paths(run):
        old.unlink()
    for i in range(config.seeds):
        seed = config.adapter_seed(i)
        adapter = train_adapter(model, index, train, valid, config.m2, config.k, seed, lr=config.lr,
                                batch_size=config.batch_size, d_proj=config.d_proj, on_retrieval=monitor)
        Checkpoint(config, model, adapter, INDEX_FILE, seed).save(run / f"adapter_seed{i}.ckpt")
        print(f"adapter seed {seed} written to {run / f'adapter_seed{i}.ckpt'}")
    if model.checksum() != checksum:
        raise CliError("phase 2 modified the frozen model")
    if monitor.violations:
        raise CliError(f"retrieval dropout violated {monitor.violations} times")
    print(f"dropout checks: {monitor.checked}, violations: 0")


def cmd_evaluate(args) -> None:
    run = _run_dir(args)
    ckpt = _load_model(run)
    config = _overrides(ckpt.config, args)
    dataset = load_dataset(config)
    examples = dataset.split(args.split)
    counts = dataset.class_counts("train") if dataset.task.is_classification else {}
    if args.mode == "base":
        reports = [evaluate(ckpt, examples, "base", counts)]
    else:
        adapters = [Checkpoint.load(p) for p in _adapter_paths(run)]
        if args.mode == "enhanced" and not adapters:
            raise CliError("adapter missing: run train-adapter first")
        index = _load_index(run, ckpt.model.embedding_dim)
        prep = prepare_split(ckpt.model, index, examples, config.k, training=False)
        if args.mode == "enhanced":
            reports = [evaluate_prepared(ckpt.model, a.adapter, prep, "enhanced", counts, config) for a in adapters]
        else:
            reports = [evaluate_prepared(ckpt.model, None, prep, "averaging", counts, config)]
    for i, rep in enumerate(reports):
        _write_json(run / "metrics" / f"{args.mode}_{args.split}_seed{i}.json", rep)
    agg = aggregate(reports)
    _write_json(run / "metrics" / f"{args.mode}_{args.split}_aggregate.json", agg)
    print(render_table(agg))


def cmd_baseline(args) -> None:
    run = _run_dir(args)
    ckpt = _load_model(run)
    config = _overrides(ckpt.config, args)
    dataset = load_dataset(config)
    index = _load_index(run, ckpt.model.embedding_dim)
    counts = dataset.class_counts("train") if dataset.task.is_classification else None
    report = baseline_majority(index, ckpt.model, dataset.split(args.split), args.n, counts, config)
    name = "retrieval" if args.n == 1 else f"majority{args.n}"
    _write_json(run / "metrics" / f"baseline_{name}_{args.split}.json", report)
    print(render_table(report))


def cmd_report(args) -> None:
    path = _require(Path(args.path), "metrics file")
    print(render_table(MetricsReport.from_json(path.read_text(encoding="utf-8"))))


def cmd_gradcheck(args) -> None:
    seed = 0 if args.seed is None else args.seed
    results = run_suite(args.instances, seed)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name:<{width}}  instances={r.instances}  max_rel_err={r.max_rel_err:.3e}  {status}")
    if not all(r.passed for r in results):
        raise CliError("gradient check failed")


def cmd_run(args) -> None:
    config = _config(args)
    result = train_two_phase(config, out_dir=_run_dir(args), split=args.split)
    for mode in MODES:
        print(f"== {mode}")
        print(render_table(result.aggregates[mode]))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regnn", description="Retrieval-enhanced GNN training and evaluation.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_, *flags):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        if "config" in flags:
            p.add_argument("--config", help="TOML run config")
        if "out" in flags:
            p.add_argument("--out", help="run directory (or output file for gen-data)")
        if "seed" in flags:
            p.add_argument("--seed", type=int)
        if "split" in flags:
            p.add_argument("--split", choices=("train", "valid", "test"), default="test")
        if "k" in flags:
            p.add_argument("--k", type=int, help="retrieval count")
        if "groups" in flags:
            p.add_argument("--boundaries", type=_floats, help="class-frequency group boundaries, e.g. 100,500")
            p.add_argument("--edges", type=_floats, help="regression bucket edges, e.g. 0,10,20,30")
        return p

    p = add("gen-data", cmd_gen_data, "write a synthetic dataset as JSONL plus task sidecar", "out", "seed")
    p.add_argument("--kind", choices=("motif", "regression"), default="motif")
    p.add_argument("--num-classes", type=int, default=20)
    p.add_argument("--head", type=int, default=200)
    p.add_argument("--tail", type=int, default=5)
    p.add_argument("--tail-fraction", type=float, default=0.25)
    p.add_argument("--size", type=int, default=2000)

    add("train", cmd_train, "phase 1: train the GNN", "config", "out", "seed", "split", "k", "groups")
    add("build-index", cmd_build_index, "index training-set embeddings of the trained model", "out")
    add("train-adapter", cmd_train_adapter, "phase 2: train the adapter for each seed", "out", "seed", "k")
    p = add("evaluate", cmd_evaluate, "score a split", "out", "split", "k", "groups")
    p.add_argument("--mode", choices=MODES, default="enhanced")
    p = add("baseline", cmd_baseline, "retrieval-only baselines", "out", "split", "groups")
    p.add_argument("--n", type=int, default=1, help="neighbors for majority voting (1 = nearest label)")
    p = sub.add_parser("report", help="render a metrics JSON file as a table")
    p.add_argument("path")
    p.set_defaults(func=cmd_report)
    p = add("gradcheck", cmd_gradcheck, "finite-difference gradient suite", "seed")
    p.add_argument("--instances", type=int, default=20)
    add("run", cmd_run, "both phases, all seeds, all modes", "config", "out", "seed", "split", "k", "groups")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (CliError, ValueError, OSError, RuntimeError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
