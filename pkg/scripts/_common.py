import argparse
import json
from dataclasses import asdict

from regnn.experiments import default_config
from regnn.gnn import GnnConfig


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--m1", type=int, default=300)
    p.add_argument("--m2", type=int, default=200)
    p.add_argument("--k", type=int, default=3)
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--hidden", type=int, default=64)
    p.add_argument("--kind", choices=("gin", "gcn"), default="gin")
    p.add_argument("--json", help="also write the result here")
    return p


def config(args):
    return default_config(model=GnnConfig(kind=args.kind, layers=3, hidden_dim=args.hidden),
                        m1=args.m1, m2=args.m2, k=args.k, seeds=args.seeds)


def finish(args, result, lines):
    print("\n".join(lines))
    print(f"runtime {result.seconds:.0f}s")
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(asdict(result), fh, indent=2)
