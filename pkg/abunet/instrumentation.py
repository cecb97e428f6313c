"""
Training instrumentation: activation-parameter trajectories, per-layer
pre-activation statistics, covariate-shift drift, activation shape exports
and run-to-run variability of the final activation parameters.

Everything here only reads network state; a run with a RunLog attached
produces the same parameters as one without.
"""
import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .activations import ABU_MEMBERS, AbuUnit, FixedActivation, ScaledActivation
from .constants import DRIFT_WINDOW_FRACTION, RECORD_EVERY_STEPS, SHAPE_GRID

logger = logging.getLogger(__name__)

ALPHA_HEADER = ["step", "layer", "role", "member", "raw", "effective"]
PREACT_HEADER = ["step", "layer", "mean", "std"]
VAL_HEADER = ["step", "accuracy"]
SHAPE_HEADER = ["layer", "x", "y"]
LOSS_HEADER = ["step", "loss", "accuracy"]

MEMBER_NAMES = tuple(member.kind.value for member in ABU_MEMBERS)


class InstrumentationError(ValueError):
    """Raised for empty drift windows, unknown layers or mismatched run sets."""


def parameter_name(layer: int, role: str, member: str = "") -> str:
    """Name of the Parameter behind one trace ("act3/alpha2", "act1/beta", ...)."""
    if role == "blend":
        return f"act{layer}/alpha{MEMBER_NAMES.index(member) + 1}"
    if role == "scale":
        return f"act{layer}/alpha"
    return f"act{layer}/beta"


@dataclass
class AlphaTrace:
    """Trajectory of one activation parameter: (step, raw, effective) points."""
    layer: int
    role: str
    member: str = ""
    steps: List[int] = field(default_factory=list)
    raw: List[float] = field(default_factory=list)
    effective: List[float] = field(default_factory=list)

    @property
    def key(self) -> Tuple[int, str, str]:
        return self.layer, self.role, self.member

    @property
    def parameter(self) -> str:
        return parameter_name(self.layer, self.role, self.member)

    def append(self, step: int, raw: float, effective: float) -> None:
        if self.steps and step <= self.steps[-1]:
            raise InstrumentationError(f"Trace {self.parameter}: step {step} after {self.steps[-1]}")
        self.steps.append(int(step))
        self.raw.append(float(raw))
        self.effective.append(float(effective))


@dataclass
class PreactStats:
    """Per-step mean and standard deviation of one layer's pre-activations."""
    layer: int
    steps: List[int] = field(default_factory=list)
    means: List[float] = field(default_factory=list)
    stds: List[float] = field(default_factory=list)

    def append(self, step: int, mean: float, std: float) -> None:
        self.steps.append(int(step))
        self.means.append(float(mean))
        self.stds.append(float(std))


@dataclass
class ShapeExport:
    layer: int
    label: str
    grid: np.ndarray
    values: np.ndarray


@dataclass
class DriftResult:
    layer: int
    drift: float
    mean_shift: float
    early_std: float
    late_std: float


@dataclass
class CrossRunSummary:
    """Final activation parameters across R runs: per-parameter mean and population sigma."""
    runs: int
    means: Dict[str, float]
    sigmas: Dict[str, float]
    mean_sigma: float
    mean_sigma_by_role: Dict[str, float]
    mean_sigma_by_layer: Dict[int, float]


def _trace_points(activation) -> List[Tuple[str, str, float, float]]:
    """(role, member, raw, effective) for every parameter of one activation."""
    points = []
    if isinstance(activation, AbuUnit):
        raw = activation.raw_weights()
        effective = activation.effective()
        for name, r, e in zip(MEMBER_NAMES, raw, effective):
            points.append(("blend", name, float(r), float(e)))
    elif isinstance(activation, ScaledActivation):
        alpha = float(activation.alpha.values)
        points.append(("scale", "", alpha, alpha))
    beta = getattr(activation, "beta", None)
    if beta is not None:
        value = float(beta.values)
        points.append(("beta", "", value, value))
    return points


class RunLog:
    """
    Append-only record of one training run.

    Attach `probe` to a forward pass to capture pre-activation statistics,
    then call `record` with the same step to store them together with the
    current activation parameters. record_every=0 turns per-step recording
    off; final activation parameters and shapes are still kept.
    """

    def __init__(self, config: Optional[dict] = None, record_every: int = RECORD_EVERY_STEPS):
        self.config = dict(config or {})
        self.record_every = record_every
        self.alpha_traces: Dict[Tuple[int, str, str], AlphaTrace] = {}
        self.preact: Dict[int, PreactStats] = {}
        self.val_curve: List[Tuple[int, float]] = []
        self.loss: List[Tuple[int, float, float]] = []
        self.shapes: List[ShapeExport] = []
        self._pending: Dict[int, Tuple[float, float]] = {}

    def should_record(self, step: int) -> bool:
        return self.record_every > 0 and step % self.record_every == 0

    def probe(self, layer_index: int, values: np.ndarray) -> None:
        # statistics pooled over batch, channels and spatial positions
        values = np.asarray(values, dtype=np.float64)
        self._pending[layer_index] = (float(values.mean()), float(values.std()))

    def record_alphas(self, step: int, net) -> None:
        for index in sorted(net.activations):
            for role, member, raw, effective in _trace_points(net.activations[index]):
                key = (index, role, member)
                if key not in self.alpha_traces:
                    self.alpha_traces[key] = AlphaTrace(layer=index, role=role, member=member)
                self.alpha_traces[key].append(step, raw, effective)

    def record(self, step: int, net) -> None:
        """One point per trace plus the pre-activation statistics captured since the last call."""
        self.record_alphas(step, net)
        for index in sorted(self._pending):
            mean, std = self._pending[index]
            self.preact.setdefault(index, PreactStats(layer=index)).append(step, mean, std)
        self._pending.clear()

    def log_loss(self, step: int, loss: float, accuracy: float) -> None:
        self.loss.append((int(step), float(loss), float(accuracy)))

    def log_validation(self, step: int, accuracy: float) -> None:
        self.val_curve.append((int(step), float(accuracy)))

    def final_values(self) -> Dict[str, float]:
        """Last recorded raw value of every activation parameter."""
        return {trace.parameter: trace.raw[-1] for trace in self.alpha_traces.values() if trace.raw}

    def traces_for(self, role: str) -> List[AlphaTrace]:
        return [t for t in self.alpha_traces.values() if t.role == role]


def _window_size(count: int, fraction: float) -> int:
    return max(1, int(count * fraction))


def covariate_shift_metric(
    stats: PreactStats,
    early_window: Optional[int] = None,
    late_window: Optional[int] = None,
) -> DriftResult:
    """
    Relative change of a layer's pre-activation spread between two windows.

    Args:
        stats: Recorded statistics of one layer
        early_window: Number of leading points (default: first 10%, at least one)
        late_window: Number of trailing points (default: last 10%, at least one)

    Returns:
        DriftResult with D = |median(late std) - median(early std)| / median(early std)
        and the mean shift |median(late mean) - median(early mean)| in units of the early std
    """
    count = len(stats.stds)
    early = early_window if early_window is not None else _window_size(count, DRIFT_WINDOW_FRACTION)
    late = late_window if late_window is not None else _window_size(count, DRIFT_WINDOW_FRACTION)
    if count == 0 or not (0 < early <= count) or not (0 < late <= count):
        raise InstrumentationError(f"Layer {stats.layer}: empty drift window ({count} points, windows {early}/{late})")
    stds = np.asarray(stats.stds)
    means = np.asarray(stats.means)
    early_std = float(np.median(stds[:early]))
    late_std = float(np.median(stds[count - late:]))
    if early_std == 0.0:
        raise InstrumentationError(f"Layer {stats.layer}: zero early standard deviation")
    mean_shift = abs(float(np.median(means[count - late:])) - float(np.median(means[:early]))) / early_std
    return DriftResult(
        layer=stats.layer,
        drift=abs(late_std - early_std) / early_std,
        mean_shift=mean_shift,
        early_std=early_std,
        late_std=late_std,
    )


def drift_table(run_log: RunLog) -> List[DriftResult]:
    return [covariate_shift_metric(run_log.preact[i]) for i in sorted(run_log.preact) if run_log.preact[i].stds]


def default_grid() -> np.ndarray:
    low, high, count = SHAPE_GRID
    return np.linspace(low, high, count)


def export_shape(net, layer: int, grid: Optional[np.ndarray] = None) -> ShapeExport:
    """Tabulate a layer's activation g_i(x) with its current (end-of-training) parameters."""
    if layer not in net.activations:
        raise InstrumentationError(f"Network has no activation layer {layer}")
    activation = net.activations[layer]
    grid = default_grid() if grid is None else np.asarray(grid, dtype=np.float64)
    if isinstance(activation, FixedActivation) and not isinstance(activation, ScaledActivation):
        logger.debug(f"Layer {layer} has a fixed activation ({activation.label}); exporting f(x)")
    values = np.asarray(activation.evaluate(grid), dtype=np.float64)
    return ShapeExport(layer=layer, label=activation.label, grid=grid, values=values)


def export_shapes(run_log: RunLog, net, grid: Optional[np.ndarray] = None) -> None:
    run_log.shapes = [export_shape(net, index, grid) for index in sorted(net.activations)]


def _comparable(config: dict) -> dict:
    """Config without seed and source paths; tuples and lists compare equal."""
    result = {}
    for key, value in config.items():
        if key in ("seed", "out", "data_dir"):
            continue
        if key == "alpha_init" and isinstance(value, str):
            value = value.split(":", 1)[0]
        result[key] = list(value) if isinstance(value, tuple) else value
    return result


def cross_run_summary(run_logs: Sequence[RunLog]) -> CrossRunSummary:
    """
    Spread of the final activation parameters over repeated runs.

    Args:
        run_logs: Logs of at least two runs whose configs differ only in the seed

    Returns:
        CrossRunSummary with population standard deviations
    """
    if len(run_logs) < 2:
        raise InstrumentationError(f"Need at least 2 runs, got {len(run_logs)}")
    reference = _comparable(run_logs[0].config)
    for log in run_logs[1:]:
        if _comparable(log.config) != reference:
            raise InstrumentationError("Runs differ in more than the seed")
    finals = [log.final_values() for log in run_logs]
    names = sorted(finals[0])
    if any(sorted(f) != names for f in finals[1:]):
        raise InstrumentationError("Runs record different activation parameters")

    means, sigmas = {}, {}
    for name in names:
        values = np.array([f[name] for f in finals])
        means[name] = float(values.mean())
        sigmas[name] = float(values.std())

    def grouped(keyfn) -> Dict:
        groups: Dict = {}
        for name, sigma in sigmas.items():
            groups.setdefault(keyfn(name), []).append(sigma)
        return {k: float(np.mean(v)) for k, v in groups.items()}

    def role(name: str) -> str:
        leaf = name.split("/", 1)[1]
        if leaf == "beta":
            return "beta"
        return "scale" if leaf == "alpha" else "blend"

    return CrossRunSummary(
        runs=len(run_logs),
        means=means,
        sigmas=sigmas,
        mean_sigma=float(np.mean(list(sigmas.values()))) if sigmas else 0.0,
        mean_sigma_by_role=grouped(role),
        mean_sigma_by_layer=grouped(lambda name: int(name.split("/", 1)[0][3:])),
    )


def _write_rows(path: Path, header: List[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        writer.writerows(rows)


def export_csv(run_log: RunLog, out_dir: Union[str, Path]) -> List[Path]:
    """
    Write the run's series as CSV files.

    Args:
        run_log: Log of a completed or in-progress run
        out_dir: Target directory (created if missing)

    Returns:
        Paths of alpha_traces.csv, preact_stats.csv, val_curve.csv, shapes.csv and loss.csv
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise InstrumentationError(f"Cannot create {out_dir}: {str(e)}")

    alpha_rows = []
    for trace in sorted(run_log.alpha_traces.values(), key=lambda t: t.key):
        for step, raw, effective in zip(trace.steps, trace.raw, trace.effective):
            alpha_rows.append((step, trace.layer, trace.role, trace.member, repr(raw), repr(effective)))
    alpha_rows.sort(key=lambda row: (row[0], row[1]))
    preact_rows = sorted(
        ((step, stats.layer, repr(mean), repr(std))
         for stats in run_log.preact.values()
         for step, mean, std in zip(stats.steps, stats.means, stats.stds)),
        key=lambda row: (row[0], row[1]),
    )
    shape_rows = [(shape.layer, repr(float(x)), repr(float(y)))
                  for shape in run_log.shapes for x, y in zip(shape.grid, shape.values)]

    files = {
        "alpha_traces.csv": (ALPHA_HEADER, alpha_rows),
        "preact_stats.csv": (PREACT_HEADER, preact_rows),
        "val_curve.csv": (VAL_HEADER, [(s, repr(a)) for s, a in run_log.val_curve]),
        "shapes.csv": (SHAPE_HEADER, shape_rows),
        "loss.csv": (LOSS_HEADER, [(s, repr(l), repr(a)) for s, l, a in run_log.loss]),
    }
    written = []
    for filename, (header, rows) in files.items():
        path = out_dir / filename
        try:
            _write_rows(path, header, rows)
        except OSError as e:
            logger.error(f"Failed to write {path}: {str(e)}")
            raise InstrumentationError(f"Cannot write {path}: {str(e)}")
        written.append(path)
    logger.debug(f"Exported run log to {out_dir}")
    return written


def _read_rows(path: Path) -> List[dict]:
    if not path.is_file():
        return []
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def load_run_log(log_dir: Union[str, Path], config: Optional[dict] = None) -> RunLog:
    """Rebuild a RunLog from the CSV files written by export_csv."""
    log_dir = Path(log_dir)
    run_log = RunLog(config=config)
    for row in _read_rows(log_dir / "alpha_traces.csv"):
        key = (int(row["layer"]), row["role"], row["member"])
        trace = run_log.alpha_traces.setdefault(key, AlphaTrace(layer=key[0], role=key[1], member=key[2]))
        trace.append(int(row["step"]), float(row["raw"]), float(row["effective"]))
    for row in _read_rows(log_dir / "preact_stats.csv"):
        layer = int(row["layer"])
        run_log.preact.setdefault(layer, PreactStats(layer=layer)).append(
            int(row["step"]), float(row["mean"]), float(row["std"]))
    run_log.val_curve = [(int(r["step"]), float(r["accuracy"])) for r in _read_rows(log_dir / "val_curve.csv")]
    run_log.loss = [(int(r["step"]), float(r["loss"]), float(r["accuracy"])) for r in _read_rows(log_dir / "loss.csv")]

    shapes: Dict[int, Tuple[List[float], List[float]]] = {}
    for row in _read_rows(log_dir / "shapes.csv"):
        xs, ys = shapes.setdefault(int(row["layer"]), ([], []))
        xs.append(float(row["x"]))
        ys.append(float(row["y"]))
    config_path = log_dir.parent / "config.json"
    if config is None and config_path.is_file():
        run_log.config = json.loads(config_path.read_text(encoding="utf-8"))
    activation = run_log.config.get("activation", "")
    for layer, (xs, ys) in sorted(shapes.items()):
        run_log.shapes.append(ShapeExport(layer, activation, np.array(xs), np.array(ys)))
    return run_log
