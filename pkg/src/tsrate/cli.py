"""Command-line entry point wiring the pipeline stages to argparse."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from tsrate.core import CriterionKind
from tsrate.pipeline import (
    PipelineConfig,
    stage_adapt,
    stage_fit_bt,
    stage_judge,
    stage_meta_train,
    stage_prune_curve,
    stage_score,
    stage_select,
    stage_synth_gen,
    stage_train_rater,
    stage_validate_judge,
)
from tsrate.report import render_report


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tsrate",
        description="Rate time series data quality from pairwise judgments.",
    )
    parser.add_argument("--config", help="JSON config file; flags override its fields")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-gen", help="generate the tagged synthetic corpus")
    p.add_argument("--pairs-per-criterion", type=int, dest="synth_pairs")
    p.add_argument("--length", type=int, dest="synth_length")

    p = sub.add_parser("judge", help="sample and judge block pairs per criterion")
    p.add_argument("--judge", choices=["llm", "oracle", "heuristic"], dest="judge_kind")
    p.add_argument("--pairs-per-criterion", type=int, dest="pairs_per_criterion")
    p.add_argument("--dataset", dest="dataset_path", help="CSV/JSONL dataset (default: corpus)")
    p.add_argument("--format", dest="dataset_format", choices=["csv", "jsonl"])
    p.add_argument("--block-length", type=int, dest="block_length")
    p.add_argument("--stride", type=int, dest="stride")
    p.add_argument("--no-cache", action="store_true", help="skip the judgment cache")

    p = sub.add_parser("validate-judge", help="judge accuracy on the tagged corpus")
    p.add_argument("--judge", choices=["llm", "oracle", "heuristic"], dest="judge_kind")

    sub.add_parser("fit-bt", help="fit Bradley-Terry scores per criterion and fuse")

    p = sub.add_parser("train-rater", help="train one rater per criterion")
    p.add_argument("--epochs", type=int, dest="train_epochs")
    p.add_argument("--learning-rate", type=float, dest="train_lr")
    p.add_argument("--batch-size", type=int, dest="train_batch")
    p.add_argument("--holdout-fraction", type=float, dest="holdout_fraction")

    p = sub.add_parser("meta-train", help="meta-train raters across task datasets")
    p.add_argument("--tasks", required=True, help="task manifest JSON")

    p = sub.add_parser("adapt", help="few-shot adapt a meta-trained rater")
    p.add_argument("--criterion", required=True, choices=[str(c) for c in CriterionKind])
    p.add_argument("--shots", type=int, dest="adapt_shots")
    p.add_argument("--steps", type=int, dest="adapt_steps")
    p.add_argument("--learning-rate", type=float, dest="adapt_lr")

    p = sub.add_parser("score", help="block/point/sample scores from BT or rater")
    p.add_argument("--source", required=True, choices=["bt", "rater"])
    p.add_argument("--dataset", dest="dataset_path")
    p.add_argument("--format", dest="dataset_format", choices=["csv", "jsonl"])
    p.add_argument("--block-length", type=int, dest="block_length")
    p.add_argument("--stride", type=int, dest="stride")

    p = sub.add_parser("select", help="keep the top-rho samples by fused score")
    p.add_argument("--rho", type=float)

    p = sub.add_parser("prune-curve", help="export the progressive-removal schedule")
    p.add_argument("--steps", help="comma-separated fractions, e.g. 0.1,0.2,0.4")
    p.add_argument(
        "--direction",
        choices=["best_first", "worst_first"],
        default="best_first",
    )

    sub.add_parser("report", help="render figures and CSV summaries for a run")
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    """Map CLI flags onto config-document paths."""
    mapping = {
        "seed": "seed",
        "out": "out_dir",
        "synth_pairs": "synth.pairs_per_criterion",
        "synth_length": "synth.length",
        "judge_kind": "judge.kind",
        "pairs_per_criterion": "pairs_per_criterion",
        "dataset_path": "dataset.path",
        "dataset_format": "dataset.format",
        "block_length": "segmentation.block_length",
        "stride": "segmentation.stride",
        "train_epochs": "train.epochs",
        "train_lr": "train.learning_rate",
        "train_batch": "train.batch_size",
        "holdout_fraction": "train.holdout_fraction",
        "adapt_shots": "adapt.shots",
        "adapt_steps": "adapt.steps",
        "adapt_lr": "adapt.lr",
        "rho": "selection.rho",
    }
    overrides = {}
    for attr, key in mapping.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    if getattr(args, "steps", None) and args.command == "prune-curve":
        overrides["prune_steps"] = [float(v) for v in args.steps.split(",")]
    return overrides


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        config = PipelineConfig.load(args.config, _overrides(args))
        if args.command == "synth-gen":
            path = stage_synth_gen(config)
            print(f"wrote {path}")
        elif args.command == "judge":
            path = stage_judge(config, use_cache=not args.no_cache)
            print(f"wrote {path}")
        elif args.command == "validate-judge":
            path = stage_validate_judge(config)
            with open(path, encoding="utf-8") as fh:
                table = json.load(fh)["table"]
            for criterion, entry in sorted(table.items()):
                print(f"{criterion}: accuracy={entry['accuracy']:.4f} over {entry['pairs']} pairs")
            print(f"wrote {path}")
        elif args.command == "fit-bt":
            path = stage_fit_bt(config)
            print(f"wrote {path}")
        elif args.command == "train-rater":
            results = stage_train_rater(config)
            for criterion, entry in sorted(results.items()):
                if entry.get("trained"):
                    print(
                        f"{criterion}: holdout accuracy {entry['holdout_accuracy']:.4f} "
                        f"({entry['n_train_pairs']} train / {entry['n_holdout_pairs']} holdout pairs)"
                    )
                else:
                    print(f"{criterion}: not trained ({entry.get('reason')})")
        elif args.command == "meta-train":
            results = stage_meta_train(config, args.tasks)
            for criterion, entry in sorted(results.items()):
                if entry.get("trained"):
                    print(
                        f"{criterion}: {entry['n_tasks']} tasks, "
                        f"test accuracy {entry['test_accuracy']:.4f}"
                    )
                else:
                    print(f"{criterion}: not trained ({entry.get('reason')})")
        elif args.command == "adapt":
            path = stage_adapt(config, CriterionKind(args.criterion))
            print(f"wrote {path}")
        elif args.command == "score":
            path = stage_score(config, args.source)
            print(f"wrote {path}")
        elif args.command == "select":
            path = stage_select(config)
            print(f"wrote {path}")
        elif args.command == "prune-curve":
            path = stage_prune_curve(config, direction=args.direction)
            print(f"wrote {path}")
        elif args.command == "report":
            for path in render_report(config.out_dir):
                print(f"wrote {path}")
        else:  # pragma: no cover - argparse enforces choices
            raise ValueError(f"unknown command {args.command!r}")
    except Exception as exc:
        print(json.dumps({"error": str(exc), "stage": args.command}), file=sys.stderr)
        if args.verbose:
            raise
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
