# roi_cae/cli.py
"""Command-line entry point: ``roi-cae <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Callable, Dict, NoReturn, Optional, Sequence

from .config import ExperimentConfig, load_config
from .const import (
    DEFAULT_CANVAS,
    DEFAULT_PER_SITE,
    DEFAULT_SITES_COUNT,
    FILE_CALIBRATION,
    PACKAGE_VERSION,
    PHASES,
    SMOKE_SEEDS,
)
from .exceptions import ConfigValidationError, RoiCaeError
from .phantom import generate_dataset, load_manifest
from .report import emit_report, load_fragments
from .services import (
    AblationSpec,
    build_presets,
    calibrate_single,
    run_ablation,
    run_probes,
    run_protocol,
    train_single,
)

_LOGGER = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


def _canvas(value: str) -> tuple[int, int]:
    try:
        width, height = (int(part) for part in value.lower().split("x"))
    except ValueError as err:
        raise argparse.ArgumentTypeError(
            f"canvas must look like WIDTHxHEIGHT, got '{value}'"
        ) from err
    return width, height


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(getattr(args, "config", None))


# --- Subcommands ---
def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = _config(args)
    if args.sites > len(config.sites):
        raise ConfigValidationError(
            f"--sites {args.sites} exceeds the {len(config.sites)} configured profiles"
        )
    manifest = generate_dataset(
        args.per_site, config.sites[: args.sites], args.canvas, args.seed, args.out
    )
    _LOGGER.info("Wrote %d samples to %s", len(manifest.entries), manifest.root)
    return EXIT_OK


def _cmd_train(args: argparse.Namespace) -> int:
    result = train_single(
        load_manifest(args.manifest),
        _config(args),
        args.phase,
        args.seed,
        args.out,
        held_out_site=args.hold_out,
        from_checkpoint=args.from_checkpoint,
    )
    _LOGGER.info(
        "%s best epoch %d (stopped early: %s)",
        args.phase,
        result.best_epoch,
        result.stopped_early,
    )
    return EXIT_OK


def _cmd_calibrate(args: argparse.Namespace) -> int:
    report = calibrate_single(
        args.checkpoint,
        load_manifest(args.manifest),
        _config(args),
        held_out_site=args.hold_out,
        seed=args.seed,
    )
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        report.save(Path(args.out) / FILE_CALIBRATION)
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_ablate(args: argparse.Namespace) -> int:
    config = _config(args)
    spec = AblationSpec(
        name=f"ablation-{args.hold_out}",
        held_out_site=args.hold_out,
        seed=args.seed,
        horizon=args.horizon or config.train.ablation_horizon,
        test_echo=not args.no_test_echo,
    )
    run_ablation(
        spec, load_manifest(args.manifest), config, args.out, args.from_checkpoint
    )
    return EXIT_OK


def _cmd_probe(args: argparse.Namespace) -> int:
    report = run_probes(
        args.checkpoint,
        load_manifest(args.manifest),
        args.hold_out,
        args.out,
        seed=args.seed,
    )
    print(json.dumps(report.as_dict(), sort_keys=True))
    return EXIT_OK


def _cmd_report(args: argparse.Namespace) -> int:
    fragments = load_fragments(args.runs_dir)
    emit_report(
        fragments,
        args.out,
        runs_dir=args.runs_dir,
        ablation_table_layout=args.compact_ablation_table,
    )
    return EXIT_OK


def _cmd_protocol(args: argparse.Namespace) -> int:
    config = _config(args)
    manifest = load_manifest(args.manifest)
    if args.seeds:
        seeds = tuple(args.seeds)
    elif args.smoke:
        seeds = SMOKE_SEEDS
    else:
        seeds = config.train.seeds
    presets = build_presets(manifest.sites, seeds, config.train.enabled_terms)
    if args.preset not in presets:
        raise ConfigValidationError(
            f"Unknown preset '{args.preset}'; choose from {sorted(presets)}"
        )
    run_protocol(presets[args.preset], manifest, config, args.out)
    return EXIT_OK


# --- Parser ---
class _JsonArgumentParser(argparse.ArgumentParser):
    """Usage errors go to stderr as the same JSON object as every other failure."""

    def error(self, message: str) -> NoReturn:
        err = ConfigValidationError(f"{self.prog}: {message}", error_details=self.prog)
        print(json.dumps(_error_payload(err)), file=sys.stderr)
        self.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _JsonArgumentParser(
        prog="roi-cae",
        description="Two-phase ROI-aware convolutional autoencoder experiments.",
    )
    parser.add_argument("--version", action="version", version=PACKAGE_VERSION)
    parser.add_argument(
        "--log-level",
        default="INFO",
        choices=["DEBUG", "INFO", "WARNING", "ERROR"],
        help="Root logger level (default: INFO)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="Render a synthetic multi-site dataset")
    gen.add_argument("--sites", type=int, default=DEFAULT_SITES_COUNT)
    gen.add_argument("--per-site", type=int, default=DEFAULT_PER_SITE)
    gen.add_argument(
        "--canvas",
        type=_canvas,
        default=DEFAULT_CANVAS,
        help="Canvas as WIDTHxHEIGHT, both divisible by 16 (default: 160x112)",
    )
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--config", help="Experiment config JSON (site profiles)")
    gen.add_argument("--out", required=True)
    gen.set_defaults(handler=_cmd_gen_data)

    train = sub.add_parser("train", help="Train one phase on one split")
    train.add_argument("--manifest", required=True)
    train.add_argument("--hold-out", help="Held-out site (pooled split when omitted)")
    train.add_argument("--phase", choices=PHASES, required=True)
    train.add_argument("--seed", type=int, required=True)
    train.add_argument("--config")
    train.add_argument("--from-checkpoint")
    train.add_argument("--out", required=True)
    train.set_defaults(handler=_cmd_train)

    calibrate = sub.add_parser("calibrate", help="Calibrate Phase-2 loss weights")
    calibrate.add_argument("--checkpoint", required=True)
    calibrate.add_argument("--manifest", required=True)
    calibrate.add_argument("--hold-out")
    calibrate.add_argument("--seed", type=int)
    calibrate.add_argument("--config")
    calibrate.add_argument("--out", help="Directory for calibration.json")
    calibrate.set_defaults(handler=_cmd_calibrate)

    ablate = sub.add_parser("ablate", help="Fixed-horizon Phase-2 loss ablation")
    ablate.add_argument("--manifest", required=True)
    ablate.add_argument("--hold-out", required=True)
    ablate.add_argument("--horizon", type=int)
    ablate.add_argument("--seed", type=int, default=SMOKE_SEEDS[0])
    ablate.add_argument("--config")
    ablate.add_argument("--from-checkpoint", help="Shared Phase-1 checkpoint")
    ablate.add_argument("--no-test-echo", action="store_true")
    ablate.add_argument("--out", required=True)
    ablate.set_defaults(handler=_cmd_ablate)

    probe = sub.add_parser("probe", help="Run the frozen-latent probe battery")
    probe.add_argument("--checkpoint", required=True)
    probe.add_argument("--manifest", required=True)
    probe.add_argument("--hold-out", required=True)
    probe.add_argument("--seed", type=int)
    probe.add_argument("--out", required=True)
    probe.set_defaults(handler=_cmd_probe)

    report = sub.add_parser("report", help="Aggregate run fragments into tables")
    report.add_argument("--runs-dir", required=True)
    report.add_argument("--out", required=True)
    report.add_argument(
        "--compact-ablation-table",
        action="store_true",
        help="Drop ROI MS-SSIM from the ablation table",
    )
    report.set_defaults(handler=_cmd_report)

    protocol = sub.add_parser("protocol", help="Run a named protocol preset end to end")
    protocol.add_argument("preset", help="hold-out-<site> or standard-dev")
    protocol.add_argument("--manifest", required=True)
    protocol.add_argument("--config")
    protocol.add_argument("--seeds", type=int, nargs="+")
    protocol.add_argument("--smoke", action="store_true", help="Use the 2 smoke seeds")
    protocol.add_argument("--out", required=True)
    protocol.set_defaults(handler=_cmd_protocol)
    return parser


def _error_payload(err: RoiCaeError) -> Dict[str, Optional[str]]:
    return {"error": err.error_key, "message": str(err), "details": err.error_details}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format=LOG_FORMAT)
    handler: Callable[[argparse.Namespace], int] = args.handler
    try:
        return handler(args)
    except ConfigValidationError as err:
        print(json.dumps(_error_payload(err)), file=sys.stderr)
        return EXIT_CONFIG
    except RoiCaeError as err:
        _LOGGER.debug("Command '%s' failed", args.command, exc_info=True)
        print(json.dumps(_error_payload(err)), file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
