"""
Test module for CIFAR training at desk and full scale.
Runs only with ABUNET_DATA_DIR pointing at the CIFAR binaries and
ABUNET_RUN_SLOW=1; a full-size run takes hours on a CPU.
"""
import os

import numpy as np
import pytest

from abunet.experiment import run_experiment
from abunet.instrumentation import drift_table, load_run_log
from abunet.validation import RunSpec

pytestmark = pytest.mark.skipif(
    not os.getenv("ABUNET_DATA_DIR") or os.getenv("ABUNET_RUN_SLOW") != "1",
    reason="needs ABUNET_DATA_DIR and ABUNET_RUN_SLOW=1",
)


SEEDS = (0, 1, 2)


def tiny_cifar_run(activation, seed, out_dir):
    spec = RunSpec(arch="smcn", activation=activation, task="cifar10", optimizer="adam", seed=seed,
                   steps=2000, subset=5000, conv_channels=16, dense_units=(96, 48))
    summary = run_experiment(spec, out_dir)
    return summary, load_run_log(out_dir / spec.run_id() / "logs")


def test_desk_scale_alpha_tanh_vs_tanh(tmp_path):
    """Tiny SMCN on 5000 CIFAR-10 images: scaled tanh shrinks its alphas and drifts less than tanh"""
    drift = {}
    for activation in ("tanh", "a_tanh"):
        per_seed = []
        for seed in SEEDS:
            summary, run_log = tiny_cifar_run(activation, seed, tmp_path)
            assert summary.test_accuracy >= 0.35, f"{activation} seed {seed}"
            if activation == "a_tanh":
                alphas = [trace.raw[-1] for trace in run_log.traces_for("scale")]
                assert len(alphas) == 6
                assert sum(alpha < 1.0 for alpha in alphas) > len(alphas) / 2, alphas
            per_seed.append([result.drift for result in drift_table(run_log)])
        drift[activation] = np.mean(per_seed, axis=0)

    assert drift["tanh"].shape == (6,)
    assert int((drift["a_tanh"] < drift["tanh"]).sum()) >= 4, drift


def test_vanilla_smcn_abu_cifar10(tmp_path):
    """Default setup reaches the published accuracy band on CIFAR-10"""
    summary = run_experiment(RunSpec(arch="smcn", activation="abu", task="cifar10", seed=0), tmp_path)
    assert summary.param_count == 1_797_514 + 36
    assert 0.815 <= summary.test_accuracy <= 0.845


def test_abu_cifar100(tmp_path):
    """CIFAR-100 with ABU lands near 52%"""
    summary = run_experiment(RunSpec(arch="smcn", activation="abu", task="cifar100", seed=0), tmp_path)
    assert 0.50 <= summary.test_accuracy <= 0.545


if __name__ == '__main__':
    pytest.main(['-v', __file__])
