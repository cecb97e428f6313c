"""
Test module for instrumentation.py
Tests activation-parameter traces, pre-activation drift, shape exports,
CSV export and the cross-run variability summary.
"""
import numpy as np
import pytest

from abunet.instrumentation import (
    AlphaTrace,
    InstrumentationError,
    PreactStats,
    RunLog,
    covariate_shift_metric,
    cross_run_summary,
    drift_table,
    export_csv,
    export_shape,
    load_run_log,
    parameter_name,
)
from abunet.network import build_smcn

TINY = dict(conv_channels=4, dense_units=(8, 6), image_size=8)


@pytest.fixture
def abu_net():
    """Fixture for a tiny ABU network"""
    return build_smcn("smcn", "abu", 3, **TINY)


def finished_log(seed: int, value: float) -> RunLog:
    log = RunLog(config={"activation": "a_tanh", "steps": 10, "seed": seed})
    for layer in (1, 2):
        trace = AlphaTrace(layer=layer, role="scale")
        trace.append(0, 1.0, 1.0)
        trace.append(10, value * layer, value * layer)
        log.alpha_traces[trace.key] = trace
    return log


def test_parameter_names():
    """Traces map back to parameter names"""
    assert parameter_name(3, "blend", "relu") == "act3/alpha3"
    assert parameter_name(1, "scale") == "act1/alpha"
    assert parameter_name(2, "beta") == "act2/beta"


def test_trace_steps_must_increase():
    """Appending an older step to a trace is an error"""
    trace = AlphaTrace(layer=1, role="scale")
    trace.append(5, 1.0, 1.0)
    with pytest.raises(InstrumentationError):
        trace.append(5, 1.0, 1.0)


def test_record_collects_alphas_and_preacts(abu_net):
    """record() stores every activation parameter and the probed statistics"""
    log = RunLog(record_every=5)
    assert log.should_record(10)
    assert not log.should_record(11)
    assert not RunLog(record_every=0).should_record(0)
    log.probe(2, np.array([1.0, 3.0]))
    log.record(10, abu_net)
    assert len(log.traces_for("blend")) == 6 * 5
    assert len(log.traces_for("beta")) == 6
    assert log.preact[2].means == [2.0]
    assert log.preact[2].stds == [1.0]
    assert log.final_values()["act4/alpha5"] == pytest.approx(0.2)


def test_effective_weights_follow_normalization():
    """Recorded effective weights are the normalized ones"""
    net = build_smcn("smcn", "abu_nrm", 3, **TINY)
    for param in net.activations[1].alphas:
        param.values[()] = 0.5
    log = RunLog()
    log.record_alphas(0, net)
    blend = [t for t in log.traces_for("blend") if t.layer == 1]
    assert [t.raw[0] for t in blend] == pytest.approx([0.5] * 5)
    assert [t.effective[0] for t in blend] == pytest.approx([0.2] * 5)


def test_drift_metric():
    """D is the relative change of the median spread between windows"""
    stats = PreactStats(layer=3)
    for step in range(20):
        late = step >= 10
        stats.append(step, 2.0 if late else 0.0, 3.0 if late else 2.0)
    result = covariate_shift_metric(stats)
    assert result.layer == 3
    assert result.early_std == 2.0
    assert result.late_std == 3.0
    assert result.drift == pytest.approx(0.5)
    assert result.mean_shift == pytest.approx(1.0)


def test_drift_with_explicit_windows():
    """Window sizes can be given in points"""
    stats = PreactStats(layer=1)
    for step, std in enumerate([1.0, 1.0, 5.0, 5.0, 2.0]):
        stats.append(step, 0.0, std)
    assert covariate_shift_metric(stats, early_window=2, late_window=1).drift == pytest.approx(1.0)


def test_drift_errors():
    """Empty windows and a zero early spread are rejected"""
    with pytest.raises(InstrumentationError):
        covariate_shift_metric(PreactStats(layer=1))
    flat = PreactStats(layer=1)
    for step in range(10):
        flat.append(step, 0.0, 0.0)
    with pytest.raises(InstrumentationError):
        covariate_shift_metric(flat)
    with pytest.raises(InstrumentationError):
        covariate_shift_metric(flat, early_window=11)


def test_drift_table_skips_empty_layers():
    """Only layers with statistics appear in the table"""
    log = RunLog()
    stats = log.preact.setdefault(2, PreactStats(layer=2))
    for step in range(10):
        stats.append(step, 0.0, 1.0)
    log.preact[4] = PreactStats(layer=4)
    assert [r.layer for r in drift_table(log)] == [2]


def test_export_shape_fixed_and_scaled():
    """Exported shapes use the current parameters"""
    grid = np.linspace(-2.0, 2.0, 9)
    relu = export_shape(build_smcn("smcn", "relu", 3, **TINY), 2, grid)
    np.testing.assert_allclose(relu.values, np.maximum(grid, 0.0))

    scaled = build_smcn("smcn", "a_tanh", 3, dtype=np.float64, **TINY)
    scaled.activations[1].alpha.values[()] = 0.5
    shape = export_shape(scaled, 1, grid)
    assert shape.label == "a_tanh"
    np.testing.assert_allclose(shape.values, 0.5 * np.tanh(grid))


def test_export_shape_default_grid(abu_net):
    """121 points on [-3, 3] unless a grid is given"""
    shape = export_shape(abu_net, 1)
    assert len(shape.grid) == 121
    assert shape.grid[0] == -3.0
    assert shape.grid[-1] == 3.0


def test_export_shape_unknown_layer(abu_net):
    """Only hidden layers 1..L have activations"""
    with pytest.raises(InstrumentationError):
        export_shape(abu_net, 7)


def test_csv_export_and_reload(tmp_path, abu_net):
    """A run log written to CSV reads back with the same series"""
    log = RunLog(config={"activation": "abu"})
    log.probe(1, np.array([0.0, 2.0]))
    log.record(0, abu_net)
    log.record_alphas(50, abu_net)
    log.log_validation(0, 0.25)
    log.log_loss(0, 1.5, 0.5)
    log.shapes = [export_shape(abu_net, 1, np.array([-1.0, 0.0, 1.0]))]
    written = export_csv(log, tmp_path / "logs")
    assert sorted(p.name for p in written) == [
        "alpha_traces.csv", "loss.csv", "preact_stats.csv", "shapes.csv", "val_curve.csv"]

    reloaded = load_run_log(tmp_path / "logs", config={"activation": "abu"})
    assert reloaded.val_curve == [(0, 0.25)]
    assert reloaded.loss == [(0, 1.5, 0.5)]
    assert reloaded.preact[1].stds == [1.0]
    assert reloaded.final_values() == log.final_values()
    assert reloaded.alpha_traces[(1, "blend", "tanh")].steps == [0, 50]
    np.testing.assert_allclose(reloaded.shapes[0].values, log.shapes[0].values)


def test_cross_run_population_sigma():
    """Sigma over runs is the population standard deviation"""
    summary = cross_run_summary([finished_log(0, 1.0), finished_log(1, 3.0)])
    assert summary.runs == 2
    assert summary.means["act1/alpha"] == pytest.approx(2.0)
    assert summary.sigmas["act1/alpha"] == pytest.approx(1.0)
    assert summary.sigmas["act2/alpha"] == pytest.approx(2.0)
    assert summary.mean_sigma == pytest.approx(1.5)
    assert summary.mean_sigma_by_role == {"scale": pytest.approx(1.5)}
    assert summary.mean_sigma_by_layer[2] == pytest.approx(2.0)


def test_cross_run_needs_two_runs():
    """A single run has no spread"""
    with pytest.raises(InstrumentationError):
        cross_run_summary([finished_log(0, 1.0)])


def test_cross_run_rejects_different_configs():
    """Runs must differ only in their seed"""
    other = finished_log(1, 2.0)
    other.config["steps"] = 20
    with pytest.raises(InstrumentationError):
        cross_run_summary([finished_log(0, 1.0), other])


if __name__ == '__main__':
    pytest.main(['-v', __file__])
