"""
One complete training run: validate the run spec, load data, build and
initialize the network, train, then write the summary and status files.
"""
import logging
from pathlib import Path
from typing import Optional, Union

from .data import load_task
from .instrumentation import RunLog
from .network import build_smcn
from .report import ReportBuilder
from .run_tracker import RunStatus, RunSummary, RunTracker
from .training import init_alphas_from, train
from .utils import resolve_dtype
from .validation import RunSpec, ensure_valid

logger = logging.getLogger(__name__)


def run_experiment(
    spec: RunSpec,
    out_dir: Union[str, Path],
    data_dir: Optional[Union[str, Path]] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> RunSummary:
    """
    Execute one run into its own directory.

    Args:
        spec: Run specification
        out_dir: Parent directory; the run directory is out_dir/<run id>
        data_dir: CIFAR directory (ignored for the synthetic task)
        run_dir: Explicit run directory, overriding out_dir/<run id>

    Returns:
        RunSummary, also stored as result.json

    Raises:
        ConfigError: if the spec is invalid (no directory is created)
    """
    ensure_valid(spec)
    run_id = spec.run_id()
    run_dir = Path(run_dir) if run_dir is not None else Path(out_dir) / run_id
    tracker = RunTracker(run_dir)
    tracker.create_run(run_id)
    (run_dir / "config.json").write_text(spec.model_dump_json(indent=2), encoding="utf-8")

    try:
        tracker.update_status(RunStatus.IN_PROGRESS)
        config = spec.train_config()
        logger.info(f"Loading {spec.task} for run {run_id}")
        data = load_task(spec.task, data_dir, spec.subset, spec.image_size, spec.num_classes)

        net = build_smcn(
            spec.arch, spec.activation, spec.num_classes, spec.seed,
            conv_channels=spec.conv_channels, dense_units=spec.dense_units, image_size=spec.image_size,
            bn_placement=spec.bn_placement, dtype=resolve_dtype(spec.precision),
        )
        alpha_init = config.alpha_init
        if alpha_init.mode == "pretrained":
            init_alphas_from(net, alpha_init.source, alpha_init.trainable, alpha_init.normalize_first)

        run_log = RunLog(config=spec.model_dump(), record_every=spec.record_every_steps)
        result = train(net, data, config, run_log, run_dir)

        selected_step, selected_path = result.selected_checkpoint
        summary = RunSummary(
            run_id=run_id,
            arch=spec.arch,
            activation=spec.activation,
            task=spec.task,
            optimizer=spec.optimizer,
            seed=spec.seed,
            steps=spec.steps,
            param_count=net.param_count(),
            checkpoints=[step for step, _ in result.checkpoints],
            selected_step=selected_step,
            selected_checkpoint=str(selected_path.relative_to(run_dir)) if selected_path else None,
            selected_val_accuracy=result.selected_val_accuracy,
            test_accuracy=result.test_accuracy,
            alpha_init=spec.alpha_init,
            alpha_trainable=spec.alpha_trainable,
            alpha_normalize_first=spec.alpha_normalize_first,
        )
        tracker.write_summary(summary)
        ReportBuilder().write_summary(run_dir, summary, run_log)
        tracker.update_status(RunStatus.COMPLETE)
        logger.info(f"Run {run_id} complete: test accuracy {summary.test_accuracy}")
        return summary

    except Exception as e:
        logger.error(f"Run {run_id} failed: {str(e)}")
        tracker.update_status(RunStatus.ERROR, error_message=str(e))
        raise
