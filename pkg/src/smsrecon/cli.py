"""Command-line entry points: simulate | train | reconstruct | analyze | report.

Exit codes: 0 success, 2 configuration/usage error, 3 numerical failure.
Worker count for frame-level parallelism is capped by SMSRECON_MAX_WORKERS.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .pipeline import (
    ConfigError,
    ExperimentConfig,
    NumericalError,
    analyze_experiment,
    reconstruct_experiment,
    report_experiment,
    simulate_experiment,
    train_experiment,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smsrecon",
        description="SMS fMRI reconstruction experiments: simulate, train, "
        "reconstruct, analyze, report.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="write a synthetic SMS fMRI dataset")
    sim.add_argument("--config", type=Path, help="experiment config JSON "
                     "(defaults to the desk-scale configuration)")
    sim.add_argument("--out", type=Path, required=True)
    sim.add_argument("--seed", type=int, help="override the base seed")

    tr = sub.add_parser("train", help="train the unrolled network on a dataset")
    tr.add_argument("--dataset", type=Path, required=True)
    tr.add_argument("--mode", choices=["self-supervised", "supervised"],
                    default="self-supervised")
    tr.add_argument("--out", type=Path, required=True)
    tr.add_argument("--seed", type=int, help="override the training seed")
    tr.add_argument("--deterministic", action="store_true")

    rec = sub.add_parser("reconstruct", help="reconstruct the test time series")
    rec.add_argument("--dataset", type=Path, required=True)
    rec.add_argument("--method", choices=["split-sg", "cg-sense", "dl"], required=True)
    rec.add_argument("--checkpoint", type=Path, help="required for method 'dl'")
    rec.add_argument("--out", type=Path, required=True)
    rec.add_argument("--deterministic", action="store_true")

    an = sub.add_parser("analyze", help="run the fMRI analysis chain on reconstructions")
    an.add_argument("--dataset", type=Path, required=True)
    an.add_argument("--recon", type=Path, nargs="+", required=True)
    an.add_argument("--out", type=Path, required=True)
    an.add_argument("--no-maps", action="store_true", help="skip PNG rendering")

    rep = sub.add_parser("report", help="paired comparison of two analyzed recons")
    rep.add_argument("--analysis", type=Path, required=True)
    rep.add_argument("--proposed", required=True,
                     help="recon directory name as analyzed, e.g. dl")
    rep.add_argument("--baseline", required=True,
                     help="recon directory name as analyzed, e.g. split-sg")
    rep.add_argument("--out", type=Path, required=True)
    rep.add_argument("--no-maps", action="store_true")
    return parser


def run(args) -> int:
    if args.command == "simulate":
        config = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            config = ExperimentConfig.from_dict({**config.to_dict(), "base_seed": args.seed})
        out = simulate_experiment(config, args.out)
        print(f"dataset written to {out}")
    elif args.command == "train":
        out = train_experiment(args.dataset, args.mode, args.out,
                               seed_override=args.seed,
                               deterministic=args.deterministic)
        print(f"checkpoint written to {out}")
    elif args.command == "reconstruct":
        out = reconstruct_experiment(args.dataset, args.method, args.out,
                                     checkpoint=args.checkpoint,
                                     deterministic=args.deterministic)
        print(f"reconstruction written to {out}")
    elif args.command == "analyze":
        out = analyze_experiment(args.dataset, args.recon, args.out,
                                 render=not args.no_maps)
        print(f"analysis written to {out}")
    elif args.command == "report":
        report_experiment(args.analysis, args.proposed, args.baseline, args.out,
                          render=not args.no_maps)
        print(f"report written to {args.out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return run(args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
