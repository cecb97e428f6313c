"""
Training loop with periodic checkpoints, post-hoc early stopping and
initialization of activation parameters from a preceding run.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, model_validator

from .activations import AbuUnit, ActivationConfig, DegenerateNormalizationError, NormMode
from .autodiff import NonFiniteError, Tape, Tensor, backward
from .checkpoint import Checkpoint, checkpoint_path, load_checkpoint, restore, save_checkpoint, snapshot
from .constants import (
    ADAM_LR,
    CHECKPOINT_EVERY_EPOCHS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_STEPS,
    EVAL_BATCH_SIZE,
    MOMENTUM_LR_END,
    MOMENTUM_LR_START,
    MOMENTUM_MU,
    NORM_TAU,
    PREFETCH_CAPACITY,
    RECORD_EVERY_STEPS,
    SMOOTHING_WINDOW,
    VAL_EVAL_EVERY_STEPS,
)
from .data import Dataset, Prefetcher, SplitDataset, batches, iter_eval_batches, steps_per_epoch
from .instrumentation import RunLog, export_csv, export_shapes
from .network import NetworkSpec, forward_net
from .optimizers import AdamState, MomentumState, OptimizerState, TrainingError
from .run_tracker import RunTracker
from .utils import spawn_rngs

logger = logging.getLogger(__name__)


class AlphaInitError(ValueError):
    """Raised when activation parameters cannot be initialized from a source checkpoint."""
    def __init__(self, message: str, source: Optional[str] = None):
        self.source = source
        super().__init__(message if source is None else f"{message} (source: {source})")


class AlphaInitConfig(BaseModel):
    """How activation parameters are initialized."""
    mode: Literal["default", "pretrained"] = Field("default", description="default values or a preceding run's final values")
    source: Optional[str] = Field(None, description="Checkpoint (or run directory) to copy activation parameters from")
    trainable: bool = Field(True, description="Keep activation parameters adaptive after initialization")
    normalize_first: bool = Field(False, description="Divide copied blending weights by their sum")

    @model_validator(mode="after")
    def _check_mode(self):
        if self.mode == "pretrained" and not self.source:
            raise ValueError("pretrained alpha initialization needs a source checkpoint")
        if self.mode == "default" and (self.source or self.normalize_first or not self.trainable):
            raise ValueError("source, normalize_first and trainable=false apply to pretrained initialization only")
        return self

    @classmethod
    def parse(cls, text: str, trainable: bool = True, normalize_first: bool = False) -> "AlphaInitConfig":
        """'default' or 'pretrained:PATH'."""
        if text == "default":
            return cls(trainable=trainable, normalize_first=normalize_first)
        if text.startswith("pretrained:"):
            return cls(mode="pretrained", source=text.split(":", 1)[1], trainable=trainable,
                       normalize_first=normalize_first)
        raise ValueError(f"alpha init must be 'default' or 'pretrained:PATH', got '{text}'")


class TrainConfig(BaseModel):
    """Hyperparameters of one training run."""
    steps: int = Field(DEFAULT_STEPS, ge=0, description="Number of optimizer updates")
    batch_size: int = Field(DEFAULT_BATCH_SIZE, gt=0)
    optimizer: Literal["adam", "momentum"] = "adam"
    lr: float = Field(ADAM_LR, gt=0, description="Adam learning rate")
    momentum: float = Field(MOMENTUM_MU, ge=0, lt=1)
    lr_start: float = Field(MOMENTUM_LR_START, gt=0)
    lr_end: float = Field(MOMENTUM_LR_END, gt=0)
    checkpoint_every_epochs: int = Field(CHECKPOINT_EVERY_EPOCHS, gt=0)
    val_eval_every_steps: int = Field(VAL_EVAL_EVERY_STEPS, gt=0)
    record_every_steps: int = Field(RECORD_EVERY_STEPS, gt=0)
    smoothing_window: int = Field(SMOOTHING_WINDOW, gt=0)
    prefetch: int = Field(PREFETCH_CAPACITY, ge=0, description="Prefetch queue capacity, 0 disables the background thread")
    seed: int = 0
    precision: Literal["float32", "float64"] = "float32"
    alpha_init: AlphaInitConfig = Field(default_factory=AlphaInitConfig)

    @model_validator(mode="after")
    def _check_schedule(self):
        if self.lr_end > self.lr_start:
            raise ValueError(f"lr_end ({self.lr_end}) must not exceed lr_start ({self.lr_start})")
        return self

    def make_optimizer(self) -> OptimizerState:
        if self.optimizer == "adam":
            return AdamState(lr=self.lr)
        return MomentumState(steps=self.steps, mu=self.momentum, lr_start=self.lr_start, lr_end=self.lr_end,
                             lr=self.lr_start)


@dataclass
class RunResult:
    checkpoints: List[Tuple[int, Optional[Path]]]
    val_curve: List[Tuple[int, float]]
    selected_checkpoint: Tuple[int, Optional[Path]]
    test_accuracy: Optional[float]
    run_log: RunLog
    final_train_accuracy: Optional[float] = None
    selected_val_accuracy: Optional[float] = None

    @property
    def selected_step(self) -> int:
        return self.selected_checkpoint[0]


def softmax_xent(tape: Tape, logits: Tensor, labels: np.ndarray) -> Tuple[Tensor, float]:
    """
    Mean cross-entropy loss and batch accuracy.

    Args:
        tape: Tape the logits were recorded on
        logits: [B, C]
        labels: [B] class indices

    Returns:
        Tuple of (scalar loss tensor, fraction of argmax matches; ties go to the lowest class)
    """
    loss = tape.softmax_xent(logits, labels)
    accuracy = float(np.mean(np.argmax(logits.values, axis=1) == np.asarray(labels)))
    return loss, accuracy


def evaluate(net: NetworkSpec, dataset: Dataset, batch_size: int = EVAL_BATCH_SIZE) -> float:
    """Accuracy over every image of a dataset, evaluated in mini-batches."""
    if dataset.num_classes != net.num_classes:
        raise TrainingError(f"Dataset has {dataset.num_classes} classes but the network predicts {net.num_classes}")
    correct = 0
    for batch in iter_eval_batches(dataset, batch_size, dtype=net.dtype):
        logits = forward_net(net, batch.x, mode="eval")
        correct += int(np.sum(np.argmax(logits.values, axis=1) == batch.y))
    return correct / len(dataset)


def smooth_curve(values: Sequence[float], window: int = SMOOTHING_WINDOW) -> np.ndarray:
    """Centered moving average, truncated at both ends."""
    values = np.asarray(values, dtype=np.float64)
    half = window // 2
    return np.array([values[max(0, i - half):i + half + 1].mean() for i in range(len(values))])


def post_hoc_select(val_curve: Sequence[Tuple[int, float]], checkpoints: Sequence, window: int = SMOOTHING_WINDOW):
    """
    Pick the checkpoint with the highest smoothed validation accuracy.

    Args:
        val_curve: (step, accuracy) evaluation points
        checkpoints: Checkpoint steps, or tuples whose first item is the step
        window: Moving-average width in evaluation points

    Returns:
        The selected element of `checkpoints` (earliest on ties)
    """
    if not checkpoints:
        raise ValueError("post_hoc_select needs at least one checkpoint")
    if not val_curve:
        raise ValueError("post_hoc_select needs a nonempty validation curve")
    curve = sorted(val_curve)
    steps = np.array([s for s, _ in curve])
    smoothed = smooth_curve([a for _, a in curve], window)

    def step_of(item) -> int:
        return item[0] if isinstance(item, tuple) else int(item)

    best, best_value = None, -np.inf
    for item in sorted(checkpoints, key=step_of):
        # argmin returns the first (earlier) curve point on distance ties
        nearest = int(np.argmin(np.abs(steps - step_of(item))))
        if smoothed[nearest] > best_value:
            best, best_value = item, smoothed[nearest]
    return best


def init_alphas_from(
    net: NetworkSpec,
    source: Union[Checkpoint, str, Path],
    trainable: bool = True,
    normalize_first: bool = False,
) -> NetworkSpec:
    """
    Copy activation parameters from a preceding run.

    Args:
        net: Freshly initialized network; all non-activation weights are kept
        source: Checkpoint, checkpoint file or run directory (its selected checkpoint)
        trainable: False freezes all activation parameters
        normalize_first: Divide each layer's copied blending weights by their sum
            (unconstrained ABU only)

    Returns:
        The same network
    """
    ckpt = source if isinstance(source, Checkpoint) else load_checkpoint(resolve_source(source))
    label = str(ckpt.path) if ckpt.path else None
    config = net.activation
    if not config.is_adaptive:
        raise AlphaInitError(f"Activation '{config.name}' has no scaling or blending weights to initialize", label)
    if ActivationConfig.parse(ckpt.activation) != config:
        raise AlphaInitError(f"Source activation '{ckpt.activation}' does not match '{config.name}'", label)
    if normalize_first and not (config.family == "abu" and config.norm_mode is NormMode.NONE):
        raise AlphaInitError("normalize_first applies to unconstrained ABUs only", label)

    names = net.activation_parameter_names()
    restore(net, ckpt, names)
    if normalize_first:
        for index, act in net.activations.items():
            if isinstance(act, AbuUnit):
                total = float(act.raw_weights().sum())
                if abs(total) < NORM_TAU:
                    raise DegenerateNormalizationError(NormMode.NRM, total, index)
                for param in act.alphas:
                    param.tensor.values[...] = param.values / total
    if not trainable:
        for name in names:
            net.parameters[name].trainable = False
    logger.info(f"Initialized {len(names)} activation parameters from {label or 'checkpoint'} "
                f"(trainable={trainable}, normalize_first={normalize_first})")
    return net


def resolve_source(source: Union[str, Path]) -> Path:
    """A checkpoint file, or a run directory standing for its selected checkpoint."""
    path = Path(source)
    if path.is_dir():
        selected = RunTracker(path).selected_checkpoint()
        if selected is None:
            raise AlphaInitError("Run directory has no selected checkpoint", str(path))
        return selected
    return path


class _CheckpointStore:
    """Checkpoints on disk when a run directory is given, in memory otherwise."""

    def __init__(self, run_dir: Optional[Path]):
        self.run_dir = run_dir
        self.entries: List[Tuple[int, Optional[Path]]] = []
        self._memory: Dict[int, Checkpoint] = {}

    def add(self, ckpt: Checkpoint) -> None:
        path = None
        if self.run_dir is not None:
            path = save_checkpoint(ckpt, checkpoint_path(self.run_dir, ckpt.step))
        else:
            self._memory[ckpt.step] = ckpt
        self.entries.append((ckpt.step, path))

    def get(self, entry: Tuple[int, Optional[Path]]) -> Checkpoint:
        step, path = entry
        return load_checkpoint(path) if path is not None else self._memory[step]

    @property
    def last(self) -> Optional[Tuple[int, Optional[Path]]]:
        return self.entries[-1] if self.entries else None


def train(
    net: NetworkSpec,
    data: SplitDataset,
    config: TrainConfig,
    run_log: Optional[RunLog] = None,
    run_dir: Optional[Union[str, Path]] = None,
) -> RunResult:
    """
    Run the training loop and select the final model post hoc.

    Validation accuracy is measured at step 0, every val_eval_every_steps
    updates and after the last update. Checkpoints are written every
    checkpoint_every_epochs epochs (epoch = floor(train N / batch size)
    updates) and after the last update; an init-only run (steps=0) has one
    checkpoint at step 0. On return the network holds the selected weights.

    Args:
        net: Network to train in place
        data: Split data; its test part, when present, is evaluated at the end
        config: Training hyperparameters
        run_log: Instrumentation sink (a fresh RunLog when omitted)
        run_dir: Directory for checkpoints/ and logs/ (checkpoints stay in memory when omitted)

    Returns:
        RunResult
    """
    run_dir = Path(run_dir) if run_dir is not None else None
    run_log = run_log if run_log is not None else RunLog(config=config.model_dump(), record_every=config.record_every_steps)
    batch_rng, dropout_rng = spawn_rngs(config.seed, 2)
    optimizer = config.make_optimizer()
    train_set = data.train
    per_epoch = steps_per_epoch(len(train_set), config.batch_size)
    if per_epoch == 0:
        raise TrainingError(f"batch_size {config.batch_size} exceeds the {len(train_set)} training images")
    checkpoint_every = config.checkpoint_every_epochs * per_epoch
    store = _CheckpointStore(run_dir)
    trainable = net.trainable_parameters()
    frozen = len(net.parameters) - len(trainable)

    logger.info(
        f"Training {net.variant.value}/{net.activation.name} for {config.steps} steps with {config.optimizer} "
        f"({len(train_set)} train, {len(data.val)} val, checkpoint every {checkpoint_every} steps, {frozen} frozen)"
    )

    def validate(step: int) -> None:
        accuracy = evaluate(net, data.val)
        run_log.log_validation(step, accuracy)
        logger.info(f"step {step}: validation accuracy {accuracy:.4f}")

    def checkpoint(step: int) -> None:
        store.add(snapshot(net, step, optimizer, dropout_rng.bit_generator.state))

    validate(0)
    if config.steps == 0:
        run_log.record_alphas(0, net)
        checkpoint(0)

    source = batches(train_set, config.batch_size, batch_rng, steps=config.steps, dtype=net.dtype)
    stream = Prefetcher(source, config.prefetch) if config.prefetch and config.steps else source
    last_accuracy = None
    try:
        for t, batch in enumerate(stream):
            recording = run_log.should_record(t)
            tape = Tape()
            net.zero_grad()
            try:
                logits = forward_net(net, batch.x, mode="train", rng=dropout_rng,
                                     probe=run_log.probe if recording else None, tape=tape)
                loss, last_accuracy = softmax_xent(tape, logits, batch.y)
            except NonFiniteError as err:
                last = store.last
                logger.error(f"Non-finite values at step {t}; last good checkpoint: {last}")
                raise TrainingError(f"Non-finite values ({err})", step=t) from err
            if recording:
                run_log.record(t, net)
            backward(tape, loss)
            grads = {p.name: p.tensor.grad for p in trainable}
            optimizer.step(trainable, grads)
            run_log.log_loss(t, loss.item(), last_accuracy)

            done = t + 1
            if done % config.val_eval_every_steps == 0 or done == config.steps:
                validate(done)
            if done % checkpoint_every == 0 or done == config.steps:
                checkpoint(done)
    finally:
        if isinstance(stream, Prefetcher):
            stream.close()

    if config.steps > 0:
        run_log.record_alphas(config.steps, net)
    export_shapes(run_log, net)

    selected = post_hoc_select(run_log.val_curve, store.entries, config.smoothing_window)
    restore(net, store.get(selected))
    selected_val = dict(run_log.val_curve).get(selected[0])
    test_accuracy = evaluate(net, data.test) if data.test is not None else None
    logger.info(f"Selected checkpoint at step {selected[0]}; test accuracy {test_accuracy}")

    if run_dir is not None:
        export_csv(run_log, run_dir / "logs")

    return RunResult(
        checkpoints=list(store.entries),
        val_curve=list(run_log.val_curve),
        selected_checkpoint=selected,
        test_accuracy=test_accuracy,
        run_log=run_log,
        final_train_accuracy=last_accuracy,
        selected_val_accuracy=selected_val,
    )
