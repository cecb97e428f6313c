"""
Batches of training runs from a grid file and their aggregate result table.

Grid file: one line per run group, whitespace-separated key=value pairs,
'#' starts a comment. `seeds` takes a comma list or an a-b range and
expands the line into one run per seed.

    arch=smcn activation=abu task=cifar10 optimizer=adam seeds=0-29
"""
import csv
import logging
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import ValidationError
from scipy.stats import rankdata

from .experiment import run_experiment
from .run_tracker import RunStatus, RunTracker
from .validation import ConfigError, RunSpec, ValidationResult, validate_run_spec

logger = logging.getLogger(__name__)

GRID_KEYS = (
    "arch", "activation", "task", "optimizer", "seeds", "steps", "batch_size", "conv_channels", "dense_units",
    "subset", "bn_placement", "precision", "alpha_init", "alpha_trainable", "alpha_normalize_first",
)
RESULTS_HEADER = ["run_id", "arch", "activation", "task", "optimizer", "alpha_treatment", "seed", "status",
                  "test_accuracy", "selected_step", "error"]

Column = Tuple[str, str, str]


@dataclass
class SweepOutcome:
    spec: RunSpec
    status: str
    test_accuracy: Optional[float] = None
    selected_step: Optional[int] = None
    error: str = ""


@dataclass
class CellStats:
    """Mean ± standard error of test accuracy (percent) over the runs of one cell."""
    mean: float
    se: Optional[float]
    n: int


@dataclass
class TableRow:
    label: str
    cells: List[Optional[CellStats]]
    mean_rank: Optional[float] = None


@dataclass
class ResultsTable:
    columns: List[Column]
    rows: List[TableRow] = field(default_factory=list)

    def cell(self, label: str, column: Column) -> Optional[CellStats]:
        index = self.columns.index(column)
        for row in self.rows:
            if row.label == label:
                return row.cells[index]
        raise KeyError(label)

    def mean_rank(self, label: str) -> Optional[float]:
        for row in self.rows:
            if row.label == label:
                return row.mean_rank
        raise KeyError(label)


def _parse_seeds(text: str) -> List[int]:
    if "-" in text and "," not in text:
        start, stop = (int(part) for part in text.split("-", 1))
        if stop < start:
            raise ValueError(f"empty seed range '{text}'")
        return list(range(start, stop + 1))
    return [int(part) for part in text.split(",") if part]


def _field_value(key: str, value: str):
    if key == "dense_units":
        return tuple(int(part) for part in value.split(","))
    if key in ("alpha_trainable", "alpha_normalize_first"):
        lowered = value.lower()
        if lowered not in ("true", "false"):
            raise ValueError(f"{key} must be true or false, got '{value}'")
        return lowered == "true"
    return value


def parse_grid_line(line: str) -> List[RunSpec]:
    """One RunSpec per seed of a grid line; blank and comment lines yield none."""
    text = line.split("#", 1)[0].strip()
    if not text:
        return []
    fields: Dict[str, object] = {}
    seeds = [0]
    for token in text.split():
        if "=" not in token:
            raise ValueError(f"expected key=value, got '{token}'")
        key, value = token.split("=", 1)
        if key not in GRID_KEYS:
            raise ValueError(f"unknown key '{key}'")
        if key == "seeds":
            seeds = _parse_seeds(value)
        else:
            fields[key] = _field_value(key, value)
    return [RunSpec(seed=seed, **fields) for seed in seeds]


def parse_grid_file(path: Union[str, Path]) -> List[RunSpec]:
    """
    Read a grid file.

    Args:
        path: Grid file

    Returns:
        List of RunSpecs in file order

    Raises:
        ConfigError: listing every malformed or invalid line
    """
    specs: List[RunSpec] = []
    errors: List[str] = []
    warnings: List[str] = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ConfigError(f"Cannot read grid file {path}: {str(e)}")
    for number, line in enumerate(lines, start=1):
        try:
            line_specs = parse_grid_line(line)
        except (ValueError, ValidationError) as e:
            errors.append(f"line {number}: {str(e)}")
            continue
        for spec in line_specs:
            result = validate_run_spec(spec)
            errors.extend(f"line {number}: {message}" for message in result.errors)
            warnings.extend(f"line {number}: {message}" for message in result.warnings)
        specs.extend(line_specs)
    for warning in sorted(set(warnings)):
        logger.warning(warning)
    if errors:
        raise ConfigError("Invalid grid file:\n" + "\n".join(errors),
                          ValidationResult(is_valid=False, errors=errors, warnings=warnings))
    if not specs:
        raise ConfigError(f"Grid file {path} lists no runs")
    return specs


def _execute(spec: RunSpec, out_dir: str, data_dir: Optional[str]) -> SweepOutcome:
    try:
        summary = run_experiment(spec, out_dir, data_dir)
    except Exception as e:
        logger.error(f"Run {spec.run_id()} failed: {str(e)}")
        return SweepOutcome(spec, RunStatus.ERROR.value, error=str(e))
    return SweepOutcome(spec, RunStatus.COMPLETE.value, summary.test_accuracy, summary.selected_step)


def _reuse(spec: RunSpec, out_dir: Path) -> Optional[SweepOutcome]:
    tracker = RunTracker(out_dir / spec.run_id())
    if not tracker.is_complete():
        return None
    summary = tracker.read_summary()
    logger.info(f"Reusing completed run {spec.run_id()}")
    return SweepOutcome(spec, RunStatus.COMPLETE.value, summary.test_accuracy, summary.selected_step)


def run_sweep(
    specs: Sequence[RunSpec],
    out_dir: Union[str, Path],
    data_dir: Optional[Union[str, Path]] = None,
    workers: int = 1,
) -> List[SweepOutcome]:
    """
    Execute runs sequentially or in worker processes.

    Completed runs already present in out_dir are reused. Each run stays
    internally deterministic; only the completion order depends on workers.

    Returns:
        Outcomes in the order of `specs`
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data_arg = str(data_dir) if data_dir else None
    outcomes: Dict[int, SweepOutcome] = {}
    pending = []
    for index, spec in enumerate(specs):
        reused = _reuse(spec, out_dir)
        if reused is not None:
            outcomes[index] = reused
        else:
            pending.append(index)

    logger.info(f"Sweep: {len(specs)} runs, {len(pending)} to execute with {workers} worker(s)")
    if workers <= 1:
        for index in pending:
            outcomes[index] = _execute(specs[index], str(out_dir), data_arg)
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {pool.submit(_execute, specs[index], str(out_dir), data_arg): index for index in pending}
            for future in as_completed(futures):
                outcomes[futures[future]] = future.result()
    return [outcomes[i] for i in range(len(specs))]


def write_results_csv(outcomes: Sequence[SweepOutcome], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(RESULTS_HEADER)
        for o in outcomes:
            s = o.spec
            writer.writerow([
                s.run_id(), s.arch, s.activation, s.task, s.optimizer, s.alpha_treatment, s.seed, o.status,
                "" if o.test_accuracy is None else repr(o.test_accuracy),
                "" if o.selected_step is None else o.selected_step,
                o.error,
            ])
    return path


def read_results_csv(path: Union[str, Path]) -> List[dict]:
    with open(path, encoding="utf-8", newline="") as handle:
        return list(csv.DictReader(handle))


def mean_ranks(values: Dict[str, Dict[Column, float]]) -> Dict[str, Optional[float]]:
    """
    Average-tie ranks per column (1 = highest value), averaged per row.

    Args:
        values: Row label -> column -> value; missing cells are skipped

    Returns:
        Row label -> mean rank over the row's present cells (None for an empty row)
    """
    ranks: Dict[str, List[float]] = {label: [] for label in values}
    columns = sorted({column for row in values.values() for column in row})
    for column in columns:
        labels = [label for label in values if column in values[label]]
        column_ranks = rankdata([-values[label][column] for label in labels], method="average")
        for label, rank in zip(labels, column_ranks):
            ranks[label].append(float(rank))
    return {label: (float(np.mean(r)) if r else None) for label, r in ranks.items()}


def _row_label(row: dict) -> str:
    treatment = row.get("alpha_treatment") or ""
    return f"{row['activation']} [{treatment}]" if treatment else row["activation"]


def aggregate(rows: Sequence[dict]) -> ResultsTable:
    """
    Build the results table from sweep_results.csv rows.

    Cells hold the mean and standard error (sample sigma / sqrt(R)) of test
    accuracy in percent over completed runs; cells without a completed run
    are missing.
    """
    columns: List[Column] = []
    labels: List[str] = []
    samples: Dict[str, Dict[Column, List[float]]] = {}
    for row in rows:
        column = (row["arch"], row["optimizer"], row["task"])
        label = _row_label(row)
        if column not in columns:
            columns.append(column)
        if label not in labels:
            labels.append(label)
        if row["status"] == RunStatus.COMPLETE.value and row["test_accuracy"] not in ("", None):
            samples.setdefault(label, {}).setdefault(column, []).append(100.0 * float(row["test_accuracy"]))

    means = {label: {column: float(np.mean(v)) for column, v in samples.get(label, {}).items()} for label in labels}
    ranks = mean_ranks(means)
    table = ResultsTable(columns=columns)
    for label in labels:
        cells: List[Optional[CellStats]] = []
        for column in columns:
            values = samples.get(label, {}).get(column)
            if not values:
                cells.append(None)
                continue
            n = len(values)
            se = float(np.std(values, ddof=1) / np.sqrt(n)) if n > 1 else None
            cells.append(CellStats(mean=float(np.mean(values)), se=se, n=n))
        table.rows.append(TableRow(label=label, cells=cells, mean_rank=ranks[label]))
    return table


def aggregate_file(path: Union[str, Path]) -> ResultsTable:
    return aggregate(read_results_csv(path))
