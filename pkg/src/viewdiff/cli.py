"""Command-line pipeline driver.

Subcommands: gen-data, train-diffusion, impute, train-predictor, evaluate,
report, grad-check. Every flag shadows the matching RunConfig key; --config
loads a JSON config first. Relative output paths resolve under
$VIEWDIFF_OUTDIR when it is set. Exit codes: 0 ok, 1 failed invariant or
diagnostics, 2 usage errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .errors import ViewdiffError
from .pipeline import (load_run_config, resolve_out, stage_evaluate,
                       stage_gen_data, stage_grad_check, stage_impute,
                       stage_report, stage_train_diffusion,
                       stage_train_predictor)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON config file")
    p.add_argument("--profile", choices=("desk", "paper"))
    p.add_argument("--seed", type=int)
    p.add_argument("--split-seed", type=int, dest="split_seed")
    p.add_argument("--task", choices=("PHE", "LOS"))
    p.add_argument("--d-tilde", type=int, dest="d_tilde")
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--steps", type=int, dest="T", help="diffusion steps T")
    p.add_argument("--sample-steps", type=int, dest="sample_steps")
    p.add_argument("--guidance", type=float, dest="guidance_scale")
    p.add_argument("--prototypes", type=int, dest="k_prototypes")
    p.add_argument("--eta", type=float)
    p.add_argument("--p-drop", type=float, dest="p_drop")
    p.add_argument("--lr", type=float)
    p.add_argument("--weight-decay", type=float, dest="weight_decay")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--diffusion-epochs", type=int, dest="diffusion_epochs")
    p.add_argument("--predictor-epochs", type=int, dest="predictor_epochs")
    p.add_argument("--missing-rate", type=float, dest="missing_rate")
    # cohort generator shorthands
    p.add_argument("--patients", type=int)
    p.add_argument("--coupling", type=float)
    p.add_argument("--visits-max", type=int, dest="visits_max")


_RUN_KEYS = ("profile", "seed", "split_seed", "task", "d_tilde", "layers", "heads",
             "T", "sample_steps", "guidance_scale", "k_prototypes", "eta", "p_drop",
             "lr", "weight_decay", "batch_size", "diffusion_epochs",
             "predictor_epochs", "missing_rate")
_COHORT_KEYS = {"patients": "n_patients", "coupling": "coupling",
                "visits_max": "visits_max"}


def _config_from_args(args: argparse.Namespace):
    overrides: dict = {}
    for key in _RUN_KEYS:
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    cohort: dict = {}
    for flag, key in _COHORT_KEYS.items():
        value = getattr(args, flag, None)
        if value is not None:
            cohort[key] = value
    if cohort:
        overrides["cohort"] = cohort
    return load_run_config(getattr(args, "config", None), overrides)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="viewdiff",
        description="Diffusion imputation of missing record views plus a "
                    "view-rebalanced longitudinal predictor.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic cohort")
    _add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--truth-out", type=Path, dest="truth_out",
                   help="also write the complete (pre-masking) cohort")

    p = sub.add_parser("train-diffusion", help="train the imputation model")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")

    p = sub.add_parser("impute", help="fill missing views of a cohort")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--jobs", type=int, default=1)

    p = sub.add_parser("train-predictor", help="train the longitudinal predictor")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="checkpoint directory")

    p = sub.add_parser("evaluate", help="score the test split and write reports")
    _add_config_flags(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True, help="predictor checkpoint")
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.add_argument("--truth", type=Path,
                   help="complete cohort for imputation-quality metrics")

    p = sub.add_parser("report", help="side-by-side comparison of evaluate runs")
    p.add_argument("manifests", type=Path, nargs="+")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("grad-check", help="run the numerics verification suite")
    p.add_argument("--seed", type=int, default=2024)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "grad-check":
            ok, lines = stage_grad_check(seed=args.seed)
            print("\n".join(lines))
            print("grad-check:", "PASS" if ok else "FAIL")
            return 0 if ok else 1

        if args.command == "report":
            out = stage_report([Path(m) for m in args.manifests], resolve_out(args.out))
            print(f"report written to {out}")
            return 0

        config = _config_from_args(args)
        if args.command == "gen-data":
            manifest = stage_gen_data(
                config, resolve_out(args.out),
                resolve_out(args.truth_out) if args.truth_out else None)
        elif args.command == "train-diffusion":
            manifest = stage_train_diffusion(config, args.data, resolve_out(args.out))
        elif args.command == "impute":
            manifest = stage_impute(config, args.data, args.model,
                                    resolve_out(args.out), jobs=args.jobs)
        elif args.command == "train-predictor":
            manifest = stage_train_predictor(config, args.data, resolve_out(args.out))
        elif args.command == "evaluate":
            manifest = stage_evaluate(config, args.data, args.model,
                                      resolve_out(args.out), truth=args.truth)
        else:  # pragma: no cover - argparse enforces the choices
            parser.error(f"unknown command {args.command}")
        print(f"manifest: {manifest}")
        return 0
    except ViewdiffError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
