"""Command-line interface.

Exit codes: 0 success, 2 configuration error, 3 stage failure, 4 privacy
boundary violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .model import CheckpointError
from .pipeline import (
    ConfigError,
    DPBoundaryError,
    PipelineConfig,
    StageError,
    attack_stage,
    extract_stats_stage,
    fit_stage,
    run_pipeline,
    sample_stage,
    simulate_stage,
    validate_stage,
)

EXIT_OK, EXIT_CONFIG, EXIT_STAGE, EXIT_DP = 0, 2, 3, 4

log = logging.getLogger("topicsynth")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> tuple[float, ...]:
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = {"default": argparse.SUPPRESS} if suppress else {}
    parser.add_argument("--config", help="JSON config file (flat key-value object)", **d)
    parser.add_argument("--seed", type=int, help="master seed", **d)
    parser.add_argument("--jobs", type=int, help="worker threads for attacks", **d)
    parser.add_argument("--deterministic", action=argparse.BooleanOptionalAction,
                        help="omit wall-times so reruns are byte-identical", **d)
    parser.add_argument("--out-dir", help="output directory", **d)
    parser.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR", **d)


# Flag name -> PipelineConfig field, shared by all subcommands that take it.
_CONFIG_FLAGS = {
    "users": ("users", int), "archetypes": ("archetypes", int), "zipf": ("zipf", float),
    "dirichlet": ("dirichlet", float), "rho": ("rho", float), "weeks": ("weeks", int),
    "k": ("k", int), "p": ("p", float), "taxonomy_size": ("taxonomy_size", int),
    "sites": ("sites", int), "epsilon": ("epsilon", float), "delta": ("delta", float),
    "split": ("split", _floats), "types": ("types", int), "batch_size": ("batch_size", int),
    "lr": ("lr", float), "epochs": ("epochs", int), "init_std": ("init_std", float),
    "eval_every": ("eval_every", int), "eval_size": ("eval_size", int),
    "target_loss": ("target_loss", float), "queries": ("queries", int), "trials": ("trials", int),
    "alpha": ("alpha", float), "holdout_frac": ("holdout_frac", float),
    "rel_threshold": ("rel_threshold", float),
}


def _add(sub, *names: str) -> None:
    for name in names:
        _, typ = _CONFIG_FLAGS[name]
        sub.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="topicsynth", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    subs = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_):
        sub = subs.add_parser(name, help=help_)
        _global_flags(sub, suppress=True)
        return sub

    s = command("simulate", "generate a ground-truth population and its traces")
    _add(s, "users", "archetypes", "zipf", "dirichlet", "rho", "weeks", "k", "p", "taxonomy_size", "sites")
    s.add_argument("--out-sequences", required=True)
    s.add_argument("--out-traces")

    s = command("extract-stats", "release (noisy) marginal statistics of a population")
    _add(s, "epsilon", "delta", "split", "k", "taxonomy_size")
    s.add_argument("--in-sequences", required=True)
    s.add_argument("--no-noise", action="store_true", help="noiseless statistics (testing only)")

    s = command("fit", "fit the mixture-of-types model to DP statistics")
    _add(s, "types", "weeks", "k", "batch_size", "lr", "epochs", "init_std", "eval_every", "eval_size",
         "target_loss", "taxonomy_size")
    s.add_argument("--stats-dir", required=True)
    s.add_argument("--out-model", required=True)
    s.add_argument("--log-csv", help="training log (default: <out-model>.log.csv)")
    s.add_argument("--allow-non-private", action="store_true",
                   help="accept noiseless statistics (testing only)")

    s = command("sample", "draw synthetic topic set sequences from a checkpoint")
    s.add_argument("--model", required=True)
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--pad", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--out-sequences", required=True)

    s = command("attack", "measure re-identification risk")
    _add(s, "queries", "trials", "weeks", "p", "alpha", "holdout_frac", "k", "taxonomy_size")
    s.add_argument("--in-sequences", required=True)
    s.add_argument("--attack", choices=("hamming", "asymmetric"), required=True)
    s.add_argument("--population", type=int, help="use only the first N users")
    s.add_argument("--out-report", required=True)

    s = command("validate", "compare datasets and statistics")
    _add(s, "rel_threshold", "k", "taxonomy_size")
    s.add_argument("--in-a", required=True, help="reference sequences (stationarity is computed here)")
    s.add_argument("--in-b", help="sequences to compare against --in-a")
    s.add_argument("--stats-dir", help="target statistics for the error distributions")
    s.add_argument("--weeks", type=int, help="weeks for the distinct-topic histogram")

    command("pipeline", "run every stage end to end")
    return parser


def _config(args) -> PipelineConfig:
    overrides = {}
    for name, (field, _) in _CONFIG_FLAGS.items():
        value = getattr(args, name, None)
        if value is not None:
            overrides[field] = value
    for flag, field in (("seed", "seed"), ("jobs", "jobs"), ("deterministic", "deterministic"),
                        ("out_dir", "out_dir")):
        if getattr(args, flag, None) is not None:
            overrides[field] = getattr(args, flag)
    if getattr(args, "no_noise", False):
        overrides["no_noise"] = True
    if getattr(args, "config", None):
        return PipelineConfig.from_json(args.config, **overrides)
    return PipelineConfig.from_dict(overrides)


def _dispatch(args) -> None:
    cfg = _config(args)
    cmd = args.command
    if cmd == "simulate":
        simulate_stage(cfg, args.out_sequences, args.out_traces)
    elif cmd == "extract-stats":
        extract_stats_stage(cfg, args.in_sequences, cfg.out_dir)
    elif cmd == "fit":
        fit_stage(cfg, args.stats_dir, args.out_model, args.log_csv or args.out_model + ".log.csv",
                  args.allow_non_private)
    elif cmd == "sample":
        sample_stage(args.model, args.n, cfg.stage_seed("sample"), args.out_sequences, args.pad)
    elif cmd == "attack":
        report = attack_stage(cfg, args.in_sequences, args.attack, args.out_report,
                              cfg.stage_seed("attack"), args.population)
        print(json.dumps({"attack": report["attack"], "mean": report["mean"], "std": report["std"]}))
    elif cmd == "validate":
        summary = validate_stage(cfg, args.in_a, cfg.out_dir, args.in_b, args.stats_dir, args.weeks)
        print(json.dumps(summary, sort_keys=True))
    elif cmd == "pipeline":
        manifest = run_pipeline(cfg)
        print(os.path.join(cfg.out_dir, "manifest.json"), f"({len(manifest.stages)} stages)")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # --help and usage errors
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    level = getattr(args, "log_level", None) or "WARNING"
    if not isinstance(logging.getLevelName(level.upper()), int):
        print(f"topicsynth: error: unknown log level {level!r}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except DPBoundaryError as exc:
        print(f"topicsynth: privacy boundary violation: {exc}", file=sys.stderr)
        return EXIT_DP
    except ConfigError as exc:
        print(f"topicsynth: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except StageError as exc:
        print(f"topicsynth: {exc}", file=sys.stderr)
        return EXIT_STAGE
    except (CheckpointError, OSError, ValueError, RuntimeError) as exc:
        print(f"topicsynth: {args.command} failed: {exc}", file=sys.stderr)
        return EXIT_STAGE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
