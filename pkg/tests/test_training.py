"""
Test module for training.py
Tests run configuration, the training loop cadence, post-hoc checkpoint
selection and activation-parameter initialization from earlier runs.
"""
import numpy as np
import pytest
from pydantic import ValidationError

from abunet.activations import NormMode
from abunet.autodiff import Tape, Tensor
from abunet.checkpoint import list_checkpoints, snapshot
from abunet.data import load_task, make_synthetic
from abunet.instrumentation import RunLog
from abunet.network import build_smcn
from abunet.optimizers import TrainingError
from abunet.training import (
    AlphaInitConfig,
    AlphaInitError,
    TrainConfig,
    evaluate,
    init_alphas_from,
    post_hoc_select,
    smooth_curve,
    softmax_xent,
    train,
)

TINY = dict(conv_channels=4, dense_units=(8, 6), image_size=8)
# 13 evaluation points 250 steps apart: one spike at step 750, a plateau from step 2000
SPIKE_CURVE = [(250 * i, 0.95 if i == 3 else (0.6 if i >= 8 else 0.5)) for i in range(13)]


@pytest.fixture(scope="module")
def data():
    """Fixture for a small 4-class synthetic task at 8x8"""
    return load_task("synthetic", subset=400, image_size=8, num_classes=4)


def quick_config(**overrides):
    settings = dict(steps=50, batch_size=19, checkpoint_every_epochs=1, val_eval_every_steps=25,
                    record_every_steps=10, prefetch=0, seed=0)
    settings.update(overrides)
    return TrainConfig(**settings)


def test_train_config_rejects_negative_steps():
    """steps must be >= 0"""
    with pytest.raises(ValidationError):
        TrainConfig(steps=-1)


def test_train_config_rejects_rising_schedule():
    """Momentum learning rate may not increase"""
    with pytest.raises(ValidationError):
        TrainConfig(optimizer="momentum", lr_start=0.001, lr_end=0.01)


def test_alpha_init_parse():
    """'default' and 'pretrained:PATH' forms"""
    assert AlphaInitConfig.parse("default").mode == "default"
    config = AlphaInitConfig.parse("pretrained:runs/a", trainable=False)
    assert config.source == "runs/a"
    assert not config.trainable
    with pytest.raises(ValueError):
        AlphaInitConfig.parse("random")


def test_alpha_init_default_cannot_freeze():
    """trainable=false only makes sense with a source"""
    with pytest.raises(ValidationError):
        AlphaInitConfig(trainable=False)
    with pytest.raises(ValidationError):
        AlphaInitConfig(mode="pretrained")


def test_softmax_xent_accuracy():
    """Batch accuracy uses argmax of the logits"""
    tape = Tape()
    logits = Tensor(np.array([[2.0, 0.0], [0.0, 1.0], [3.0, 0.0]]), requires_grad=True)
    loss, accuracy = softmax_xent(tape, logits, np.array([0, 1, 1]))
    assert accuracy == pytest.approx(2 / 3)
    assert loss.item() > 0


def test_evaluate_class_mismatch():
    """A 3-class network cannot be evaluated on 4-class data"""
    net = build_smcn("smcn", "relu", 3, **TINY)
    with pytest.raises(TrainingError):
        evaluate(net, make_synthetic(20, 4, seed=0, image_size=8))


def test_evaluate_is_repeatable():
    """Evaluating the same weights twice gives the same accuracy"""
    net = build_smcn("smcn", "relu", 4, **TINY)
    dataset = make_synthetic(30, 4, seed=1, image_size=8)
    assert evaluate(net, dataset, batch_size=7) == evaluate(net, dataset)


def test_smooth_curve_truncates_at_edges():
    """Centered moving average over the available points"""
    np.testing.assert_allclose(smooth_curve([0, 0, 1, 0, 0], 3), [0, 1 / 3, 1 / 3, 1 / 3, 0])
    np.testing.assert_allclose(smooth_curve([1, 2, 3], 1), [1, 2, 3])


def test_select_follows_raw_spike_without_smoothing():
    """With window 1 the isolated spike wins"""
    assert post_hoc_select(SPIKE_CURVE, [760, 2500], window=1) == 760


def test_select_prefers_plateau_with_smoothing():
    """With window 5 the spike is averaged down to 0.59, below the 0.6 plateau"""
    assert post_hoc_select(SPIKE_CURVE, [760, 2500], window=5) == 2500


def test_select_ties_take_earliest():
    """Equal smoothed accuracies select the earliest checkpoint"""
    curve = [(0, 0.4), (100, 0.4), (200, 0.4)]
    assert post_hoc_select(curve, [200, 100]) == 100


def test_select_returns_checkpoint_entries():
    """(step, path) entries are returned as given"""
    curve = [(0, 0.1), (10, 0.9)]
    assert post_hoc_select(curve, [(0, None), (10, None)], window=1) == (10, None)


def test_select_needs_checkpoints():
    """An empty checkpoint list is an error"""
    with pytest.raises(ValueError):
        post_hoc_select([(0, 0.5)], [])


def test_init_only_run(data):
    """steps=0 evaluates once, checkpoints step 0 and selects it"""
    net = build_smcn("smcn", "abu", 4, **TINY)
    result = train(net, data, quick_config(steps=0))
    assert [step for step, _ in result.checkpoints] == [0]
    assert [step for step, _ in result.val_curve] == [0]
    assert result.selected_step == 0
    assert result.test_accuracy is not None
    assert all(trace.steps == [0] for trace in result.run_log.alpha_traces.values())


def test_cadence(data, tmp_path):
    """Checkpoints every epoch plus the final step; validation every 25 steps"""
    net = build_smcn("smcn", "a_tanh", 4, **TINY)
    result = train(net, data, quick_config(), run_dir=tmp_path)
    # 380 training images / batch 19 = 20 steps per epoch
    assert [step for step, _ in result.checkpoints] == [20, 40, 50]
    assert [step for step, _ in result.val_curve] == [0, 25, 50]
    assert [step for step, _ in list_checkpoints(tmp_path)] == [20, 40, 50]
    trace = result.run_log.traces_for("scale")[0]
    assert trace.steps == [0, 10, 20, 30, 40, 50]
    assert sorted(result.run_log.preact) == [1, 2, 3, 4, 5, 6]
    assert len(result.run_log.loss) == 50
    for name in ("alpha_traces.csv", "preact_stats.csv", "val_curve.csv", "shapes.csv", "loss.csv"):
        assert (tmp_path / "logs" / name).is_file()


def test_same_seed_same_run(data):
    """Two runs from the same seed end with identical parameters"""
    finals = []
    for _ in range(2):
        net = build_smcn("smcn", "abu", 4, seed=1, **TINY)
        train(net, data, quick_config(steps=20, prefetch=2))
        finals.append({name: p.values.copy() for name, p in net.parameters.items()})
    for name in finals[0]:
        np.testing.assert_array_equal(finals[0][name], finals[1][name])


def test_batch_larger_than_training_set(data):
    """A batch size above the training set size fails before the first step"""
    net = build_smcn("smcn", "relu", 4, **TINY)
    with pytest.raises(TrainingError):
        train(net, data, quick_config(batch_size=1000))


def test_synthetic_task_is_learned():
    """A small network beats chance clearly on the synthetic task"""
    data = load_task("synthetic", subset=800, image_size=8, num_classes=4)
    net = build_smcn("smcn_s", "relu", 4, seed=0, conv_channels=8, dense_units=(16, 8), image_size=8)
    result = train(net, data, quick_config(steps=200, batch_size=16, checkpoint_every_epochs=2,
                                           val_eval_every_steps=50))
    assert result.test_accuracy > 0.5


@pytest.mark.parametrize("variant,activation", [("smcn", "abu"), ("smcn_bn", "a_tanh")])
def test_recording_leaves_training_unchanged(data, variant, activation):
    """Recording every step and recording nothing give bit-identical trained weights"""
    finished = []
    for every in (1, 0):
        net = build_smcn(variant, activation, 4, seed=6, **TINY)
        result = train(net, data, quick_config(steps=30), run_log=RunLog(record_every=every))
        finished.append((net, result))
    (recorded, recorded_result), (plain, plain_result) = finished
    assert len(recorded_result.run_log.preact[1].stds) == 30
    assert plain_result.run_log.preact == {}
    assert recorded_result.run_log.loss == plain_result.run_log.loss
    for name, param in recorded.parameters.items():
        np.testing.assert_array_equal(param.values, plain.parameters[name].values)
    for name, state in recorded.batchnorms.items():
        np.testing.assert_array_equal(state.running_mean, plain.batchnorms[name].running_mean)
        np.testing.assert_array_equal(state.running_var, plain.batchnorms[name].running_var)


@pytest.mark.parametrize("activation", ["abu_nrm", "abu_abs", "abu_pos", "abu_soft"])
def test_normalization_invariants_hold_every_step(data, activation):
    """Effective weights stay normalized after every optimizer step"""
    net = build_smcn("smcn", activation, 4, seed=0, **TINY)
    result = train(net, data, quick_config(steps=500, batch_size=16, record_every_steps=1,
                                           checkpoint_every_epochs=50, val_eval_every_steps=250))
    mode = net.activation.norm_mode
    for layer in net.activations:
        traces = [t for t in result.run_log.traces_for("blend") if t.layer == layer]
        effective = np.array([t.effective for t in traces])
        assert effective.shape == (5, 501)
        totals = np.abs(effective).sum(axis=0) if mode is NormMode.ABS else effective.sum(axis=0)
        np.testing.assert_allclose(totals, 1.0, atol=1e-6)
        if mode in (NormMode.POS, NormMode.SOFT):
            assert (effective >= 0).all()


def test_pretrained_fixed_alphas_never_move(data):
    """Frozen pre-trained scaling weights are bit-identical at every recorded step"""
    source = build_smcn("smcn", "a_tanh", 4, **TINY)
    for act in source.activations.values():
        act.alpha.values[()] = 0.6
    net = build_smcn("smcn", "a_tanh", 4, seed=4, **TINY)
    init_alphas_from(net, snapshot(source, 100), trainable=False)
    assert not net.parameters["act1/alpha"].trainable
    result = train(net, data, quick_config(steps=20, record_every_steps=1))
    for trace in result.run_log.traces_for("scale"):
        assert len(set(trace.raw)) == 1
        assert trace.raw[0] == pytest.approx(0.6)


def test_pretrained_adaptive_alphas_move(data):
    """Trainable pre-trained scaling weights change during training"""
    source = build_smcn("smcn", "a_tanh", 4, **TINY)
    for act in source.activations.values():
        act.alpha.values[()] = 0.6
    net = build_smcn("smcn", "a_tanh", 4, seed=4, **TINY)
    init_alphas_from(net, snapshot(source, 100), trainable=True)
    result = train(net, data, quick_config(steps=20, record_every_steps=1))
    assert any(len(set(trace.raw)) > 1 for trace in result.run_log.traces_for("scale"))


def test_normalize_first_restores_unit_sum():
    """Copied ABU weights are divided by their per-layer sum"""
    source = build_smcn("smcn", "abu", 4, **TINY)
    for act in source.activations.values():
        for value, param in zip([0.1, 0.2, 0.3, 0.4, 1.0], act.alphas):
            param.values[()] = value
    net = build_smcn("smcn", "abu", 4, seed=3, **TINY)
    init_alphas_from(net, snapshot(source, 0), normalize_first=True)
    for act in net.activations.values():
        assert act.raw_weights().sum() == pytest.approx(1.0, abs=1e-6)
        assert act.raw_weights()[4] == pytest.approx(0.5, abs=1e-6)


def test_init_keeps_other_weights():
    """Only activation parameters are copied"""
    source = build_smcn("smcn", "abu", 4, seed=1, **TINY)
    net = build_smcn("smcn", "abu", 4, seed=2, **TINY)
    kernel = net.parameters["conv1/kernel"].values.copy()
    init_alphas_from(net, snapshot(source, 0))
    np.testing.assert_array_equal(net.parameters["conv1/kernel"].values, kernel)


def test_init_rejects_other_activation():
    """Source and target activation configs must match"""
    source = build_smcn("smcn", "abu", 4, **TINY)
    net = build_smcn("smcn", "abu_soft", 4, **TINY)
    with pytest.raises(AlphaInitError):
        init_alphas_from(net, snapshot(source, 0))


def test_init_rejects_fixed_activation():
    """Fixed activations have nothing to initialize"""
    source = build_smcn("smcn", "relu", 4, **TINY)
    with pytest.raises(AlphaInitError):
        init_alphas_from(build_smcn("smcn", "relu", 4, **TINY), snapshot(source, 0))


def test_normalize_first_needs_unconstrained_abu():
    """normalize_first is rejected for normalized ABUs"""
    source = build_smcn("smcn", "abu_soft", 4, **TINY)
    with pytest.raises(AlphaInitError):
        init_alphas_from(build_smcn("smcn", "abu_soft", 4, **TINY), snapshot(source, 0), normalize_first=True)


if __name__ == '__main__':
    pytest.main(['-v', __file__])
