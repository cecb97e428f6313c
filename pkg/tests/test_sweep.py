"""
Test module for sweep.py and experiment.py
Tests grid parsing, sweep execution on synthetic data, the results CSV
and the aggregated table with mean ranks.
"""
import json

import pytest

from abunet.experiment import run_experiment
from abunet.run_tracker import RunStatus, RunTracker
from abunet.sweep import (
    aggregate,
    aggregate_file,
    mean_ranks,
    parse_grid_file,
    parse_grid_line,
    read_results_csv,
    run_sweep,
    write_results_csv,
)
from abunet.validation import PUBLISHED_COLUMNS, ConfigError, RunSpec

TINY_RUN = ("task=synthetic steps=6 batch_size=16 conv_channels=4 dense_units=8,6 subset=120 "
            "precision=float64")

# Test accuracy (percent) of the published activation comparison, one value per column
REFERENCE_TABLE = {
    "identity": (75.51, 73.19, 38.87, 71.72, 77.34, 44.11),
    "a_identity": (76.52, 77.34, 39.48, 71.34, 76.32, 45.58),
    "tanh": (75.44, 58.55, 67.19, 75.10, 78.76, 41.02),
    "a_tanh": (79.07, 73.40, 68.82, 75.32, 79.14, 46.85),
    "relu": (79.42, 81.07, 72.79, 81.17, 81.63, 43.66),
    "a_relu": (79.23, 82.97, 73.89, 81.12, 81.85, 46.22),
    "elu": (81.78, 83.41, 73.33, 80.87, 82.16, 48.59),
    "a_elu": (82.60, 84.94, 75.03, 80.89, 82.06, 51.03),
    "selu": (81.75, 83.29, 71.72, 79.36, 82.48, 48.25),
    "a_selu": (82.81, 85.04, 73.79, 79.57, 81.99, 51.08),
    "swish": (82.07, 83.73, 74.33, 81.77, 82.02, 49.14),
    "a_swish": (82.27, 84.56, 75.67, 81.61, 82.35, 50.19),
    "abu": (83.12, 84.70, 76.19, 80.63, 83.12, 52.13),
}


def result_row(activation, accuracy, status="complete", task="cifar10", treatment=""):
    return {"arch": "smcn", "optimizer": "adam", "task": task, "activation": activation,
            "alpha_treatment": treatment, "status": status,
            "test_accuracy": "" if accuracy is None else str(accuracy)}


def test_parse_grid_line_expands_seeds():
    """A seed range yields one run per seed"""
    specs = parse_grid_line("arch=smcn_s activation=a_relu task=cifar100 seeds=0-2  # comment")
    assert [s.seed for s in specs] == [0, 1, 2]
    assert all(s.arch == "smcn_s" and s.task == "cifar100" for s in specs)
    assert [s.seed for s in parse_grid_line("seeds=4,9")] == [4, 9]


def test_parse_grid_line_types():
    """dense_units and boolean flags are converted"""
    spec = parse_grid_line("activation=abu dense_units=96,48 alpha_init=pretrained:runs/a "
                           "alpha_trainable=false")[0]
    assert spec.dense_units == (96, 48)
    assert spec.alpha_trainable is False
    assert spec.seed == 0


def test_parse_grid_line_comments_and_blanks():
    """Blank and comment-only lines produce nothing"""
    assert parse_grid_line("   ") == []
    assert parse_grid_line("# arch=smcn") == []


@pytest.mark.parametrize("line", ["arch", "colour=red", "seeds=5-1", "alpha_trainable=maybe"])
def test_parse_grid_line_errors(line):
    """Malformed tokens raise ValueError"""
    with pytest.raises(ValueError):
        parse_grid_line(line)


def test_parse_grid_file_reports_line_numbers(tmp_path):
    """Every bad line is reported with its number"""
    grid = tmp_path / "grid.txt"
    grid.write_text("# runs\narch=smcn activation=abu\nactivation=abu_max\nfoo\n", encoding="utf-8")
    with pytest.raises(ConfigError) as exc:
        parse_grid_file(grid)
    message = str(exc.value)
    assert "line 3" in message
    assert "line 4" in message
    assert "line 2" not in message


def test_parse_grid_file_empty(tmp_path):
    """A grid without runs is rejected"""
    grid = tmp_path / "grid.txt"
    grid.write_text("# nothing\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        parse_grid_file(grid)


def test_parse_grid_file_missing(tmp_path):
    """Unreadable grid files raise ConfigError"""
    with pytest.raises(ConfigError):
        parse_grid_file(tmp_path / "missing.txt")


def test_mean_ranks_order():
    """Higher accuracy ranks first"""
    column = ("smcn", "adam", "cifar10")
    assert mean_ranks({"abu": {column: 83.12}, "relu": {column: 79.42}}) == {"abu": 1.0, "relu": 2.0}


def test_mean_ranks_ties_share_average():
    """Tied cells share the average rank"""
    column = ("smcn", "adam", "cifar10")
    ranks = mean_ranks({"a": {column: 80.0}, "b": {column: 80.0}, "c": {column: 70.0}, "d": {}})
    assert ranks == {"a": 1.5, "b": 1.5, "c": 3.0, "d": None}


def test_mean_ranks_reproduce_reference_table():
    """Ranks over the published grid match the reported mean ranks"""
    values = {label: dict(zip(PUBLISHED_COLUMNS, row)) for label, row in REFERENCE_TABLE.items()}
    ranks = mean_ranks(values)
    assert ranks["abu"] == pytest.approx(2.33, abs=0.005)
    assert ranks["swish"] == pytest.approx(4.33, abs=0.005)
    assert ranks["a_selu"] == pytest.approx(4.33, abs=0.005)
    assert min(ranks, key=ranks.get) == "abu"


def test_aggregate_mean_and_standard_error():
    """Cells hold mean ± sample-sigma / sqrt(R) in percent"""
    rows = [result_row("abu", a) for a in (0.80, 0.82, 0.84)]
    rows.append(result_row("abu", None, status="error"))
    rows.append(result_row("relu", 0.7))
    rows.append(result_row("relu", 0.6, task="cifar100"))
    table = aggregate(rows)
    assert table.columns == [("smcn", "adam", "cifar10"), ("smcn", "adam", "cifar100")]
    cell = table.cell("abu", ("smcn", "adam", "cifar10"))
    assert cell.n == 3
    assert cell.mean == pytest.approx(82.0)
    assert cell.se == pytest.approx(2.0 / 3 ** 0.5)
    assert table.cell("relu", ("smcn", "adam", "cifar10")).se is None
    assert table.cell("abu", ("smcn", "adam", "cifar100")) is None
    assert table.mean_rank("abu") == 1.0
    assert table.mean_rank("relu") == 1.5


def test_aggregate_treatment_rows():
    """Pre-trained treatments get their own rows"""
    table = aggregate([result_row("a_tanh", 0.5), result_row("a_tanh", 0.6, treatment="pretrained-fixed")])
    assert [row.label for row in table.rows] == ["a_tanh", "a_tanh [pretrained-fixed]"]


def test_run_experiment_writes_run_directory(tmp_path):
    """One run produces config, status, result, summary, logs and checkpoints"""
    spec = parse_grid_line(f"activation=abu {TINY_RUN}")[0]
    summary = run_experiment(spec, tmp_path)
    run_dir = tmp_path / spec.run_id()
    assert json.loads((run_dir / "config.json").read_text())["activation"] == "abu"
    assert RunTracker(run_dir).is_complete()
    assert (run_dir / "summary.txt").is_file()
    assert (run_dir / "logs" / "alpha_traces.csv").is_file()
    assert summary.checkpoints == [6]
    assert summary.selected_checkpoint == "checkpoints/step_00000006.npz"
    assert 0.0 <= summary.test_accuracy <= 1.0


def test_run_experiment_rejects_invalid_spec(tmp_path):
    """Invalid specs fail before a run directory is created"""
    spec = RunSpec(activation="abu_max", task="synthetic")
    with pytest.raises(ConfigError):
        run_experiment(spec, tmp_path)
    assert list(tmp_path.iterdir()) == []


def test_run_experiment_pretrained_chain(tmp_path):
    """A run can take its activation weights from an earlier run directory"""
    first = parse_grid_line(f"activation=a_tanh {TINY_RUN}")[0]
    run_experiment(first, tmp_path)
    second = parse_grid_line(f"activation=a_tanh {TINY_RUN} seeds=1 "
                             f"alpha_init=pretrained:{tmp_path / first.run_id()} alpha_trainable=false")[0]
    summary = run_experiment(second, tmp_path / "chained")
    assert summary.alpha_init.startswith("pretrained:")
    assert not summary.alpha_trainable


def test_sweep_runs_and_reuses(tmp_path):
    """Completed runs are reused on a second sweep; results aggregate into a table"""
    grid = tmp_path / "grid.txt"
    grid.write_text(f"activation=relu {TINY_RUN} seeds=0,1\nactivation=abu {TINY_RUN}\n", encoding="utf-8")
    specs = parse_grid_file(grid)
    outcomes = run_sweep(specs, tmp_path / "sweep")
    assert [o.status for o in outcomes] == [RunStatus.COMPLETE.value] * 3

    again = run_sweep(specs, tmp_path / "sweep")
    assert [o.test_accuracy for o in again] == [o.test_accuracy for o in outcomes]

    path = write_results_csv(outcomes, tmp_path / "sweep_results.csv")
    rows = read_results_csv(path)
    assert [r["seed"] for r in rows] == ["0", "1", "0"]
    table = aggregate_file(path)
    assert table.columns == [("smcn", "adam", "synthetic")]
    assert table.cell("relu", ("smcn", "adam", "synthetic")).n == 2


def test_sweep_records_failures(tmp_path):
    """A failing run is reported without stopping the sweep"""
    bad = RunSpec(task="cifar10", steps=1)
    good = parse_grid_line(f"activation=relu {TINY_RUN}")[0]
    outcomes = run_sweep([bad, good], tmp_path, data_dir=tmp_path / "no-cifar-here")
    assert outcomes[0].status == RunStatus.ERROR.value
    assert outcomes[0].error
    assert outcomes[1].status == RunStatus.COMPLETE.value
    assert RunTracker(tmp_path / bad.run_id()).get_status()["status"] == "error"


if __name__ == '__main__':
    pytest.main(['-v', __file__])
