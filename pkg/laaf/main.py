# laaf/main.py
"""Command-line entry point.

    python -m laaf train    --config config/example.toml --seed 0,1,2 --mode llaaf
    python -m laaf verify   [--mode gaaf] [--corrupt-a]
    python -m laaf dynamics --config config/circles.toml --full

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError, LaafError, VerificationError
from .services.config import LOG_LEVEL, apply_overrides, load_config, parse_seeds
from .services.network import SlopeMode
from .worker import run_dynamics, run_training, run_verification

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="laaf", description="Adaptive activation training and gradient-dynamics lab")
    commands = parser.add_subparsers(dest="command", required=True)
    for name, text in (
        ("train", "train a preset for each seed and write traces, checkpoints and summaries"),
        ("verify", "check gradients and the adaptive-dynamics identities on random tiny networks"),
        ("dynamics", "compare condition numbers of standard and adaptive training on a classification preset"),
    ):
        command = commands.add_parser(name, help=text)
        command.add_argument("--config", help="TOML run configuration")
        command.add_argument("--seed", help="seed or comma-separated seeds, e.g. 0,1,2")
        command.add_argument("--mode", choices=[m.value for m in SlopeMode], help="activation mode")
        command.add_argument("--preset", help="problem preset name")
        command.add_argument("--out", help="output directory")
        command.add_argument("--full", action="store_true", default=None, help="include full matrices in reports")
        if name == "train":
            command.add_argument("--export-data", action="store_true", default=None, help="write data and collocation CSVs")
        if name == "verify":
            command.add_argument("--corrupt-a", action="store_true", default=None, help="negative control: perturb A")
    return parser


def _print_checks(results) -> None:
    print(f"{'check':<24}{'mode':<8}{'value':>14}{'threshold':>12}  result")
    for r in results:
        value = "" if r.value is None else f"{r.value:.3e}"
        threshold = "" if r.threshold is None else f"{r.threshold:.0e}"
        status = "PASS" if r.passed else "FAIL"
        if r.note.startswith("skipped"):
            status = "SKIP"
        print(f"{r.name:<24}{r.mode:<8}{value:>14}{threshold:>12}  {status} {r.note}".rstrip())


def cmd_train(config) -> int:
    for summary in run_training(config):
        line = f"{summary.preset} {summary.mode} seed={summary.seed} loss={summary.final['total']:.6e}"
        for name, value in summary.inverse_estimates.items():
            line += f" {name}={value:.6g}"
        if summary.relative_l2_error is not None:
            line += f" rel_l2={summary.relative_l2_error:.4e}"
        if summary.accuracy is not None:
            line += f" accuracy={summary.accuracy:.4f}"
        print(line)
    return 0


def cmd_verify(config, modes=None) -> int:
    results = run_verification(config, modes)
    _print_checks(results)
    failed = [f"{r.name} ({r.mode})" for r in results if not r.passed]
    if failed:
        raise VerificationError("failed checks: " + ", ".join(failed))
    return 0


def cmd_dynamics(config) -> int:
    summary = run_dynamics(config)
    print(f"{'method':<8}{'mean final loss':>18}{'mean final normalized condition':>34}")
    for method, stats in summary["methods"].items():
        print(f"{method:<8}{stats['mean_final_loss']:>18.6e}{stats['mean_final_normalized_condition']:>34.6e}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=LOG_LEVEL.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        config = load_config(args.config)
        config = apply_overrides(
            config,
            seeds=parse_seeds(args.seed) if args.seed else None,
            mode=args.mode,
            preset=args.preset,
            out_dir=args.out,
            full=args.full,
            export_data=getattr(args, "export_data", None),
            corrupt_a=getattr(args, "corrupt_a", None),
        )
        if args.command == "train":
            return cmd_train(config)
        if args.command == "verify":
            return cmd_verify(config, [SlopeMode(args.mode)] if args.mode else None)
        return cmd_dynamics(config)
    except ConfigError as ex:
        print(f"configuration error: {ex}", file=sys.stderr)
        return ex.exit_code
    except VerificationError as ex:
        print(f"verification failed: {ex}", file=sys.stderr)
        return ex.exit_code
    except LaafError as ex:
        logger.error("numerical failure: %s", ex)
        print(f"numerical failure: {ex}", file=sys.stderr)
        return ex.exit_code


if __name__ == "__main__":
    sys.exit(main())
