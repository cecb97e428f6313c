"""
Command-line entry point: train, eval, analyze, gradcheck and sweep.

Exit codes: 0 success, 1 run failure, 2 configuration error,
3 verification failure.
"""
import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from pydantic import ValidationError

from .activations import ActivationConfigError, DegenerateNormalizationError
from .autodiff import NonFiniteError
from .checkpoint import CheckpointError, load_checkpoint, network_from_checkpoint
from .constants import (
    CHECKPOINT_EVERY_EPOCHS,
    CONV_CHANNELS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_STEPS,
    DENSE_UNITS,
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_RUN_FAILURE,
    EXIT_VERIFICATION_FAILURE,
    IMAGE_SIZE,
    PREFETCH_CAPACITY,
    RECORD_EVERY_STEPS,
    SMOOTHING_WINDOW,
    VAL_EVAL_EVERY_STEPS,
)
from .data import TASKS, DataLoadError, load_task
from .experiment import run_experiment
from .gradcheck import SCOPES, GradcheckFailure, run_gradcheck
from .instrumentation import InstrumentationError, cross_run_summary, drift_table, load_run_log
from .network import NetworkConfigError
from .optimizers import TrainingError
from .report import ReportBuilder, ReportError
from .run_tracker import RunStatus
from .sweep import aggregate_file, parse_grid_file, run_sweep, write_results_csv
from .training import AlphaInitError, evaluate, resolve_source
from .validation import ConfigError, RunSpec

logger = logging.getLogger(__name__)

CONFIG_ERRORS = (ConfigError, ActivationConfigError, NetworkConfigError, AlphaInitError, ValidationError)
RUN_FAILURES = (TrainingError, DataLoadError, CheckpointError, NonFiniteError, DegenerateNormalizationError,
                InstrumentationError, ReportError)


def _bool(text: str) -> bool:
    lowered = text.lower()
    if lowered not in ("true", "false"):
        raise argparse.ArgumentTypeError(f"expected true or false, got '{text}'")
    return lowered == "true"


def _units(text: str):
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated widths, got '{text}'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="abunet", description="Adaptive activation experiments on SMCN networks")
    parser.add_argument("--verbose", action="store_true", help="Debug logging")
    commands = parser.add_subparsers(dest="command", required=True)

    train = commands.add_parser("train", help="Train one network")
    train.add_argument("--arch", default="smcn", help="smcn | smcn10 | smcn_s | smcn_bn")
    train.add_argument("--activation", default="abu", help="e.g. relu, a_tanh, abu, abu_soft")
    train.add_argument("--task", default="cifar10", choices=TASKS)
    train.add_argument("--optimizer", default="adam", choices=("adam", "momentum"))
    train.add_argument("--steps", type=int, default=DEFAULT_STEPS)
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--data-dir", default=None, help="CIFAR directory (default: $ABUNET_DATA_DIR)")
    train.add_argument("--out", default=None, help="Run directory (default: runs/<run id>)")
    train.add_argument("--alpha-init", default="default", help="default | pretrained:PATH")
    train.add_argument("--alpha-trainable", type=_bool, default=True, metavar="{true,false}")
    train.add_argument("--alpha-normalize-first", action="store_true")
    train.add_argument("--precision", default="float32", choices=("float32", "float64"))
    train.add_argument("--batch-size", type=int, default=DEFAULT_BATCH_SIZE)
    train.add_argument("--conv-channels", type=int, default=CONV_CHANNELS)
    train.add_argument("--dense-units", type=_units, default=DENSE_UNITS, help="e.g. 96,48")
    train.add_argument("--image-size", type=int, default=IMAGE_SIZE, help="Synthetic task only")
    train.add_argument("--subset", type=int, default=None, help="Number of training images to use")
    train.add_argument("--bn-placement", default="before", choices=("before", "after"))
    train.add_argument("--val-every", type=int, default=VAL_EVAL_EVERY_STEPS)
    train.add_argument("--record-every", type=int, default=RECORD_EVERY_STEPS)
    train.add_argument("--checkpoint-every-epochs", type=int, default=CHECKPOINT_EVERY_EPOCHS)
    train.add_argument("--smoothing-window", type=int, default=SMOOTHING_WINDOW)
    train.add_argument("--prefetch", type=int, default=PREFETCH_CAPACITY, help="Queue capacity, 0 disables")

    ev = commands.add_parser("eval", help="Test accuracy of a checkpoint")
    ev.add_argument("--checkpoint", required=True, help="Checkpoint file or run directory")
    ev.add_argument("--task", required=True, choices=TASKS)
    ev.add_argument("--data-dir", default=None)

    analyze = commands.add_parser("analyze", help="Drift tables and cross-run summaries")
    analyze.add_argument("runs", nargs="+", help="Run directories")
    analyze.add_argument("--svg", action="store_true", help="Write SVG charts into each run's charts/")
    analyze.add_argument("--out", default=None, help="Directory for cross_run_summary.csv")

    grad = commands.add_parser("gradcheck", help="Finite-difference gradient verification")
    grad.add_argument("--scope", default="all", choices=SCOPES)
    grad.add_argument("--seed", type=int, default=0)

    sweep = commands.add_parser("sweep", help="Run a grid of experiments and tabulate them")
    sweep.add_argument("--grid-file", required=True)
    sweep.add_argument("--out", default="sweep")
    sweep.add_argument("--data-dir", default=None)
    sweep.add_argument("--workers", type=int, default=1)
    return parser


def cmd_train(args: argparse.Namespace) -> int:
    spec = RunSpec(
        arch=args.arch,
        activation=args.activation,
        task=args.task,
        optimizer=args.optimizer,
        steps=args.steps,
        seed=args.seed,
        batch_size=args.batch_size,
        conv_channels=args.conv_channels,
        dense_units=args.dense_units,
        image_size=args.image_size,
        subset=args.subset,
        bn_placement=args.bn_placement,
        precision=args.precision,
        alpha_init=args.alpha_init,
        alpha_trainable=args.alpha_trainable,
        alpha_normalize_first=args.alpha_normalize_first,
        checkpoint_every_epochs=args.checkpoint_every_epochs,
        val_eval_every_steps=args.val_every,
        record_every_steps=args.record_every,
        smoothing_window=args.smoothing_window,
        prefetch=args.prefetch,
    )
    summary = run_experiment(spec, "runs", args.data_dir, run_dir=args.out)
    print(f"run: {summary.run_id}")
    print(f"selected checkpoint: step {summary.selected_step}")
    print(f"test accuracy: {summary.test_accuracy:.4f}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(resolve_source(args.checkpoint))
    net = network_from_checkpoint(ckpt)
    data = load_task(args.task, args.data_dir, image_size=net.image_size, num_classes=net.num_classes)
    if data.test.num_classes != net.num_classes:
        raise ConfigError(f"Checkpoint predicts {net.num_classes} classes but task {args.task} "
                          f"has {data.test.num_classes}")
    accuracy = evaluate(net, data.test)
    print(f"test accuracy: {accuracy:.4f} ({len(data.test)} images, checkpoint step {ckpt.step})")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    builder = ReportBuilder()
    logs = []
    for run in args.runs:
        run_dir = Path(run)
        run_log = load_run_log(run_dir / "logs")
        logs.append(run_log)
        print(f"== {run_dir}")
        print(f"{'layer':>5} {'drift':>10} {'mean shift':>11} {'early std':>10} {'late std':>10}")
        for row in drift_table(run_log):
            print(f"{row.layer:>5} {row.drift:>10.4f} {row.mean_shift:>11.4f} {row.early_std:>10.4f} "
                  f"{row.late_std:>10.4f}")
        if args.svg:
            for path in builder.write_charts(run_log, run_dir / "charts"):
                print(f"chart: {path}")

    if len(logs) >= 2:
        summary = cross_run_summary(logs)
        print(f"== cross-run summary over {summary.runs} runs")
        print(f"mean sigma: {summary.mean_sigma:.6f}")
        for role, sigma in sorted(summary.mean_sigma_by_role.items()):
            print(f"  {role}: {sigma:.6f}")
        for layer, sigma in sorted(summary.mean_sigma_by_layer.items()):
            print(f"  layer {layer}: {sigma:.6f}")
        if args.out:
            out_dir = Path(args.out)
            out_dir.mkdir(parents=True, exist_ok=True)
            with open(out_dir / "cross_run_summary.csv", "w", encoding="utf-8", newline="") as handle:
                writer = csv.writer(handle)
                writer.writerow(["parameter", "mean", "sigma"])
                for name in sorted(summary.sigmas):
                    writer.writerow([name, repr(summary.means[name]), repr(summary.sigmas[name])])
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    reports = run_gradcheck(args.scope, args.seed)
    for report in reports:
        print(f"{report.component:<32} worst rel {report.worst_relative:.2e}  "
              f"({report.checked} checked, {report.skipped} skipped)")
    print(f"gradcheck passed: {len(reports)} components")
    return EXIT_OK


def cmd_sweep(args: argparse.Namespace) -> int:
    specs = parse_grid_file(args.grid_file)
    out_dir = Path(args.out)
    outcomes = run_sweep(specs, out_dir, args.data_dir, args.workers)
    results = write_results_csv(outcomes, out_dir / "sweep_results.csv")
    text = ReportBuilder().render_results_table(aggregate_file(results))
    (out_dir / "results_table.txt").write_text(text, encoding="utf-8")
    print(text)
    failed = [o for o in outcomes if o.status != RunStatus.COMPLETE.value]
    if failed:
        logger.error(f"{len(failed)} of {len(outcomes)} runs failed")
        return EXIT_RUN_FAILURE
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
    "sweep": cmd_sweep,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_CONFIG_ERROR
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )

    try:
        return COMMANDS[args.command](args)
    except GradcheckFailure as e:
        print(str(e), file=sys.stderr)
        return EXIT_VERIFICATION_FAILURE
    except CONFIG_ERRORS as e:
        print(f"configuration error: {str(e)}", file=sys.stderr)
        return EXIT_CONFIG_ERROR
    except RUN_FAILURES as e:
        print(f"run failed: {str(e)}", file=sys.stderr)
        return EXIT_RUN_FAILURE
