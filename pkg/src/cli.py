#!/usr/bin/env python3
import argparse
import os
import sys

# Ensure src/ is on the path so 'mtl_core' imports resolve when run from source
current_dir = os.path.dirname(os.path.abspath(__file__))
if current_dir not in sys.path:
    sys.path.insert(0, current_dir)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adapmtl",
        description="Adaptive pruning of multitask networks: train, export, report, bench, gen-data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="Train a multitask model with learnable pruning thresholds")
    p.add_argument("--config", help="Run config YAML (Hydra compose root)")
    p.add_argument("--seed", type=int, help="Train a single seed (overrides train.seed and train.seeds)")
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                   help="Config override, repeatable; bare train keys are accepted (target_sparsity=0.8)")
    p.add_argument("--out", help="Output directory (must exist)")
    p.add_argument("--resume", help="Checkpoint to continue training from")

    p = sub.add_parser("export", help="Export a frozen checkpoint to a CSR sparse model")
    p.add_argument("checkpoint")
    p.add_argument("--out", help="Sparse model path (default: next to the checkpoint)")

    p = sub.add_parser("report", help="Relative performance (Δ) of metric-table rows against a baseline row")
    p.add_argument("tables", nargs="+", help="Metric-table CSV file(s); rows are concatenated")
    p.add_argument("--baseline", help="Baseline row name (default: first row)")
    p.add_argument("--convention", choices=("sum", "mean"), default="sum")
    p.add_argument("--out", help="Write the Δ table as JSON")

    p = sub.add_parser("bench", help="Compare sparse and dense inference on random inputs")
    p.add_argument("sparse_model")
    p.add_argument("checkpoint", help="Frozen dense checkpoint the sparse model was exported from")
    p.add_argument("--n", type=int, default=100, help="Number of random inputs")
    p.add_argument("--out", help="Write the bench report as JSON")

    p = sub.add_parser("gen-data", help="Generate the synthetic multitask dataset of a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", help="Dataset path (default: <output_dir>/dataset.amtl)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    # Lazy import to avoid loading the library until a command is chosen
    from mtl_core import commands
    from mtl_core.utils import setup_logging

    setup_logging()

    if args.command == "train":
        code = commands.cmd_train(args.config, args.override, seed=args.seed, out=args.out, resume=args.resume)
    elif args.command == "export":
        code = commands.cmd_export(args.checkpoint, args.out)
    elif args.command == "report":
        code = commands.cmd_report(args.tables, args.baseline, args.convention, args.out)
    elif args.command == "bench":
        code = commands.cmd_bench(args.sparse_model, args.checkpoint, args.n, args.out)
    else:
        code = commands.cmd_gen_data(args.config, args.override, args.out)
    return code


if __name__ == "__main__":
    sys.exit(main())
