"""Command-line entry point for the staged pipeline.

Subcommands map one-to-one onto pipeline stages, plus ``ablate`` for
hyperparameter sweeps.  On failure the process exits nonzero after printing
a single machine-readable line to stderr::

    error: {"type": "StageError", "message": "...", "missing_stage": "pretrain"}
"""

import argparse
import json
import sys

from .errors import CheckpointError, StageError
from .pipeline import SWEEP_DEFAULTS, RunConfig, run_ablation, run_stage

STAGE_COMMANDS = ("pretrain", "finetune", "generate", "train-seg", "eval-gen", "eval-seg", "report")

# ValueError covers ConfigError, ValidationError, and VocabularyError.
_HANDLED = (ValueError, StageError, CheckpointError, OSError)


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=argparse.SUPPRESS, help="YAML run configuration")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed override")
    parser.add_argument("--run-dir", default=argparse.SUPPRESS, help="run directory override")
    parser.add_argument(
        "--resume",
        action="store_true",
        default=argparse.SUPPRESS,
        help="skip stages whose completion markers are still valid",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="diffboost",
        description="Edge- and text-conditioned diffusion augmentation pipeline.",
    )
    _common_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "pretrain": "train the denoiser on the synthetic corpus",
        "finetune": "adapt the pretrained denoiser to the segmentation task",
        "generate": "cache diffusion variants for every training image",
        "train-seg": "train segmentation models (baseline, classic, DiffBoost)",
        "eval-gen": "score generated images against their originals",
        "eval-seg": "score segmentation models on held-out cases",
        "report": "consolidate evaluations into tables, a summary, and plots",
    }
    for name in STAGE_COMMANDS:
        stage = sub.add_parser(name, help=helps[name])
        _common_flags(stage)
    ablate = sub.add_parser("ablate", help="sweep one hyperparameter over a value grid")
    _common_flags(ablate)
    ablate.add_argument("--param", required=True, help=f"one of {tuple(SWEEP_DEFAULTS)}")
    ablate.add_argument(
        "--values",
        default=None,
        help="comma-separated sweep values (defaults to the standard grid)",
    )
    return parser


def _parse_values(param: str, text):
    if text is None:
        return None
    values = []
    for chunk in text.split(","):
        chunk = chunk.strip()
        if not chunk:
            continue
        if param == "n":
            values.append(int(chunk))
        elif param == "alpha":
            values.append(float(chunk))
        elif param == "patch_size":
            values.append(chunk if chunk == "image" else int(chunk))
        else:
            values.append(chunk)
    return values


def _load_config(args: argparse.Namespace) -> RunConfig:
    config_path = getattr(args, "config", None)
    config = RunConfig.from_yaml(config_path) if config_path else RunConfig.defaults()
    return config.with_overrides(
        seed=getattr(args, "seed", None),
        run_dir=getattr(args, "run_dir", None),
        resume=getattr(args, "resume", None),
    )


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _load_config(args)
        if args.command == "ablate":
            values = _parse_values(args.param, args.values)
            result = run_ablation(config, args.param, values)
            print(f"ablate {args.param}: {len(result['rows'])} rows -> {result['table']}")
        else:
            paths = run_stage(config, args.command)
            print(f"{args.command}: done -> {paths.root}")
        return 0
    except _HANDLED as exc:
        _print_error(exc)
        return 1


def _print_error(exc: Exception) -> None:
    payload = {"type": type(exc).__name__, "message": str(exc)}
    missing = getattr(exc, "missing_stage", None)
    if missing:
        payload["missing_stage"] = missing
    print("error: " + json.dumps(payload, sort_keys=True), file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
