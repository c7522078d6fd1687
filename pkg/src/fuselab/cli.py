"""Command-line interface.

Subcommands: train, sample, sweep-lambda, ablate, audit-derivation,
heatmaps, parse. Exit codes are a stable contract: 0 success, 1 config
error (bad flags, bad config file, bad values), 2 numerical failure
(non-finite loss or tensor).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config, validate_config
from .fusion import ABLATION_ORDER, FusionVariant
from .harness import (
    DEFAULT_LAMBDA_GRID,
    export_attention_heatmaps,
    run_ablation,
    run_derivation_audit,
    run_lambda_sweep,
    run_sample,
    run_train,
)
from .prompts import default_lexicon, parse as parse_pairs
from .tensor import NonFiniteError
from .train import TrainingDiverged


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems are config errors (exit 1)
        raise ConfigError(message)


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", type=str, default=None, help="config file path")
    sub.add_argument("--seed", type=int, default=None, help="override config seed")
    sub.add_argument("--out", type=str, default=None, help="output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="fuselab",
                     description="dual-encoder conditioning fusion testbed")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", parents=[], help="run one training job")
    _add_common(train)

    sample = commands.add_parser("sample", help="DDIM-sample one prompt from a checkpoint")
    _add_common(sample)
    sample.add_argument("--checkpoint", type=str, required=True)
    sample.add_argument("--prompt", type=str, required=True)
    sample.add_argument("--sample-seed", type=int, default=None)

    sweep = commands.add_parser("sweep-lambda", help="train or evaluate across balance factors")
    _add_common(sweep)
    sweep.add_argument("--lambdas", type=str, default=None,
                       help="comma-separated grid (default 0.0..2.0 step 0.2)")
    sweep.add_argument("--eval-only", action="store_true",
                       help="reuse one checkpoint instead of retraining per point")
    sweep.add_argument("--checkpoint", type=str, default=None)

    ablate = commands.add_parser("ablate", help="train every fusion variant")
    _add_common(ablate)
    ablate.add_argument("--variants", type=str, default=None,
                        help="comma-separated variant names (default: all six)")

    audit = commands.add_parser("audit-derivation",
                                help="measure concat-form vs sum-form attention gap")
    _add_common(audit)
    audit.add_argument("--instances", type=int, default=100)

    heat = commands.add_parser("heatmaps", help="export per-token attention heatmaps")
    _add_common(heat)
    heat.add_argument("--checkpoint", type=str, required=True)
    heat.add_argument("--prompt", type=str, required=True)

    parse_cmd = commands.add_parser("parse", help="print attribute-entity pairs as JSON lines")
    parse_cmd.add_argument("--prompt", type=str, required=True)

    return parser


def _load_cfg(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__, "seed": args.seed})
    if args.out is not None:
        cfg = ExperimentConfig(**{**cfg.__dict__, "out_dir": args.out})
    validate_config(cfg)
    return cfg


def _out_dir(cfg: ExperimentConfig, command: str) -> Path:
    return Path(cfg.out_dir) / command


def _parse_lambdas(raw: str | None) -> list[float]:
    if raw is None:
        return list(DEFAULT_LAMBDA_GRID)
    try:
        return [float(part) for part in raw.split(",") if part.strip()]
    except ValueError as exc:
        raise ConfigError(f"cannot parse --lambdas {raw!r}") from exc


def _parse_variants(raw: str | None) -> list[FusionVariant]:
    if raw is None:
        return list(ABLATION_ORDER)
    out = []
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            out.append(FusionVariant(part))
        except ValueError:
            choices = ", ".join(v.value for v in FusionVariant)
            raise ConfigError(f"unknown variant {part!r}; choose from: {choices}") from None
    return out


def _dispatch(args) -> int:
    if args.command == "parse":
        for pair in parse_pairs(args.prompt, default_lexicon()):
            print(pair.to_json())
        return 0

    cfg = _load_cfg(args)

    if args.command == "train":
        result = run_train(cfg, _out_dir(cfg, "train"))
        print(f"wrote {result['metrics_csv']}")
        print(f"wrote {result['checkpoint']}")
        return 0
    if args.command == "sample":
        result = run_sample(cfg, args.checkpoint, args.prompt,
                            _out_dir(cfg, "sample"), sample_seed=args.sample_seed)
        print(f"wrote {result['out'] / 'sample.png'}")
        return 0
    if args.command == "sweep-lambda":
        result = run_lambda_sweep(cfg, _parse_lambdas(args.lambdas),
                                  _out_dir(cfg, "sweep-lambda"),
                                  eval_only=args.eval_only, checkpoint=args.checkpoint)
        print(f"wrote {result['sweep_csv']}")
        return 0
    if args.command == "ablate":
        result = run_ablation(cfg, _parse_variants(args.variants), _out_dir(cfg, "ablate"))
        print(f"wrote {result['ablation_csv']}")
        return 0
    if args.command == "audit-derivation":
        result = run_derivation_audit(cfg, _out_dir(cfg, "audit-derivation"),
                                      instances=args.instances)
        print(f"wrote {result['report_json']}")
        return 0
    if args.command == "heatmaps":
        result = export_attention_heatmaps(args.checkpoint, args.prompt,
                                           _out_dir(cfg, "heatmaps"))
        print(f"wrote {len(result['files'])} heatmaps to {result['out']}")
        return 0
    raise ConfigError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
