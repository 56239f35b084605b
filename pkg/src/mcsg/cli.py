"""Command-line entry point: ``mcsg <subcommand> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import GENERATED_COUNTS, METHODS, dump_config, load_config, parse_config_text
from .data import DataError
from .experiment import ExperimentRunner, emit_plots, run_grid, run_statistics, write_results_csv
from .gan.networks import Variant
from .segmentation import evaluate_model, load_unet
from .stats import StatsError


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="flat key = value config file")
    p.add_argument("--profile", choices=("desk", "paper"), help="base settings (default: desk)")
    p.add_argument("--seed", type=int, help="master seed of the dataset case")
    p.add_argument("--out", help="output root (results go to OUT/<dataset_case>/)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("-v", "--verbose", action="store_true")


def _point(p: argparse.ArgumentParser):
    p.add_argument("--method", choices=METHODS, default="BL")
    p.add_argument("--count", type=int, default=0, choices=(0, *GENERATED_COUNTS), help="generated patients added")
    p.add_argument("--aug", action="store_true", help="train with data augmentation")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcsg", description="Synthetic-data augmentation benchmark for segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="build the case split and export preprocessed volumes")
    _common(p)
    p = sub.add_parser("train-gan", help="train (or reuse) one GAN variant")
    _common(p)
    p.add_argument("--variant", choices=[v.value for v in Variant], required=True)
    p = sub.add_parser("generate", help="sample generated patients for a method and count")
    _common(p)
    p.add_argument("--method", choices=("BSG", "MCSG"), required=True)
    p.add_argument("--count", type=int, choices=GENERATED_COUNTS, required=True)
    p = sub.add_parser("train-seg", help="train and evaluate a U-Net for one grid point")
    _common(p)
    _point(p)
    p = sub.add_parser("evaluate", help="evaluate a saved U-Net on the case test split")
    _common(p)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--report", type=Path, help="write the per-patient report here (.json or .csv)")
    p = sub.add_parser("stats", help="Friedman test and Nemenyi direction tables")
    _common(p)
    p.add_argument("--alpha", type=float, default=0.05)
    p = sub.add_parser("plot", help="mean DSC against generated count")
    _common(p)
    p = sub.add_parser("grid", help="run all 26 grid points, statistics and plots")
    _common(p)
    p = sub.add_parser("show-config", help="print the resolved configuration")
    _common(p)
    return parser


def resolve_config(args, **extra):
    overrides = parse_config_text("\n".join(args.set))
    overrides.update({k: v for k, v in {"seed": args.seed, "out": args.out, **extra}.items() if v is not None})
    return load_config(args.config, profile=args.profile, **overrides)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command == "train-seg":
        cfg = resolve_config(args, method=args.method, augmentation=args.aug, generated_count=args.count)
    else:
        cfg = resolve_config(args)
    try:
        _dispatch(args, cfg)
    except (DataError, StatsError) as exc:
        print(f"mcsg {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


def _dispatch(args, cfg) -> None:
    runner = ExperimentRunner(cfg)
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
    elif args.command == "prepare-data":
        root = runner.export_data()
        print(f"split: {runner.case_dir / 'split.json'}\nvolumes: {root}")
    elif args.command == "train-gan":
        variant = Variant(args.variant)
        runner.gan(variant)
        print(runner.gan_path(variant))
    elif args.command == "generate":
        ds, fid = runner.generated(args.method, args.count)
        print(f"{len(ds)} slices from {len(ds.patients)} patients at {runner.generated_root(args.method, args.count)}")
        print(f"FID ({fid['extractor']['kind']}): {fid['fid']:.4f}")
    elif args.command == "train-seg":
        rec = runner.run(cfg)
        print(f"{rec['label']}: mean DSC {rec['mean_dsc']:.4f} +/- {rec['standard_error']:.4f}")
    elif args.command == "evaluate":
        report = evaluate_model(load_unet(args.model), runner.data().split.test)
        if args.report:
            (report.to_csv if args.report.suffix == ".csv" else report.to_json)(args.report)
        print(json.dumps({"mean_dsc": report.mean_dsc, "standard_error": report.standard_error}))
    elif args.command == "stats":
        write_results_csv(runner.store, runner.case_dir, cfg.case_id)
        fr, dm = run_statistics(runner.store, runner.case_dir, cfg.case_id, alpha=args.alpha)
        print(f"Friedman chi2 = {fr.chi2:.4f}, p = {fr.p_value:.4g}; CD = {dm.critical_difference:.3f}")
        for name, score in zip(dm.methods, dm.scores):
            print(f"{score:+4d}  {name}")
    elif args.command == "plot":
        for path in emit_plots(runner.store, runner.case_dir, cfg.case_id).values():
            print(path)
    elif args.command == "grid":
        summary = run_grid(cfg)
        print(dict(summary.counters))
        print(f"results in {runner.case_dir}")


if __name__ == "__main__":
    raise SystemExit(main())
