"""
Test module for activations.py
Tests config parsing, base functions, blending-weight normalization and
the parameters each activation owns.
"""
import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from abunet.activations import (
    ABU_MEMBERS,
    AbuUnit,
    ActivationConfig,
    ActivationConfigError,
    ActivationKind,
    DegenerateNormalizationError,
    NormMode,
    effective_weights,
    eval_abu,
    eval_base,
    grad_base,
    make_activation,
)
from abunet.autodiff import Tape, Tensor
from abunet.constants import ABU_ACTIVATIONS, ALL_ACTIVATIONS, FIXED_ACTIVATIONS, SCALED_ACTIVATIONS, SELU_ALPHA, SELU_LAMBDA

raw_weights = st.lists(st.floats(min_value=-3.0, max_value=3.0, allow_nan=False), min_size=5, max_size=5)


def test_all_seventeen_configs_parse():
    """Six fixed, six scaled and five ABU configs"""
    assert len(ALL_ACTIVATIONS) == 17
    families = [ActivationConfig.parse(name).family for name in ALL_ACTIVATIONS]
    assert families.count("fixed") == 6
    assert families.count("scaled") == 6
    assert families.count("abu") == 5


@pytest.mark.parametrize("name", SCALED_ACTIVATIONS + ABU_ACTIVATIONS)
def test_adaptive_configs(name):
    """Scaled and ABU configs are adaptive"""
    assert ActivationConfig.parse(name).is_adaptive


@pytest.mark.parametrize("name", FIXED_ACTIVATIONS)
def test_fixed_configs(name):
    """Fixed configs are not adaptive"""
    assert not ActivationConfig.parse(name).is_adaptive


def test_alpha_prefix_alias():
    """'αtanh' is accepted as a_tanh"""
    config = ActivationConfig.parse("αtanh")
    assert config.name == "a_tanh"
    assert config.base is ActivationKind.TANH


def test_abu_norm_modes():
    """ABU suffixes select the normalization"""
    assert ActivationConfig.parse("abu").norm_mode is NormMode.NONE
    assert ActivationConfig.parse("ABU_soft").norm_mode is NormMode.SOFT


@pytest.mark.parametrize("name", ["gelu", "abu_max", "a_", ""])
def test_unknown_config(name):
    """Unknown config strings raise ActivationConfigError"""
    with pytest.raises(ActivationConfigError):
        ActivationConfig.parse(name)


def test_base_values():
    """Spot values of the six base functions"""
    x = np.array([-1.0, 0.0, 2.0])
    np.testing.assert_allclose(eval_base("relu", x), [0.0, 0.0, 2.0])
    np.testing.assert_allclose(eval_base("identity", x), x)
    np.testing.assert_allclose(eval_base("tanh", x), np.tanh(x))
    np.testing.assert_allclose(eval_base("elu", x), [np.expm1(-1.0), 0.0, 2.0])
    np.testing.assert_allclose(eval_base("selu", x), SELU_LAMBDA * np.array([SELU_ALPHA * np.expm1(-1.0), 0.0, 2.0]))
    np.testing.assert_allclose(eval_base("swish", x, beta=1.0), x / (1.0 + np.exp(-x)))


def test_swish_needs_beta():
    """Swish without beta is a config error"""
    with pytest.raises(ActivationConfigError):
        eval_base("swish", np.zeros(2))


def test_parameter_counts():
    """Parameters owned per layer by each family"""
    assert make_activation("relu", 1).parameters == {}
    assert list(make_activation("swish", 1).parameters) == ["act1/beta"]
    assert sorted(make_activation("a_relu", 2).parameters) == ["act2/alpha"]
    assert sorted(make_activation("a_swish", 2).parameters) == ["act2/alpha", "act2/beta"]
    abu = make_activation("abu_nrm", 3)
    assert sorted(abu.parameters) == ["act3/alpha1", "act3/alpha2", "act3/alpha3", "act3/alpha4", "act3/alpha5",
                                      "act3/beta"]


def test_abu_initial_state():
    """ABU weights start at 1/5 and beta at 1"""
    unit = make_activation("abu", 1)
    assert isinstance(unit, AbuUnit)
    np.testing.assert_allclose(unit.raw_weights(), np.full(5, 0.2))
    assert float(unit.beta.values) == 1.0


def test_abu_one_hot_recovers_member():
    """One-hot blending weights reproduce the chosen base function exactly"""
    unit = make_activation("abu", 1)
    for j, param in enumerate(unit.alphas):
        param.values[()] = 1.0 if j == 2 else 0.0
    x = np.linspace(-3, 3, 61)
    np.testing.assert_array_equal(eval_abu(unit, x), np.maximum(x, 0))


def test_scaled_activation_on_tape():
    """a_tanh multiplies tanh by the layer's alpha"""
    act = make_activation("a_tanh", 1)
    act.alpha.values[()] = 0.5
    x = np.array([[0.3, -1.2]])
    out = act(Tape(), Tensor(x))
    np.testing.assert_allclose(out.values, 0.5 * np.tanh(x))
    np.testing.assert_allclose(act.evaluate(x), 0.5 * np.tanh(x))


def test_abu_tape_matches_numpy():
    """The recorded ABU forward equals the numpy evaluation"""
    rng = np.random.default_rng(1)
    unit = make_activation("abu_soft", 2)
    for param in unit.alphas:
        param.values[()] = rng.normal()
    x = rng.normal(size=(3, 4))
    np.testing.assert_allclose(unit(Tape(), Tensor(x)).values, unit.evaluate(x), atol=1e-12)


@settings(max_examples=200, deadline=None)
@given(raw_weights)
def test_nrm_weights_sum_to_one(raw):
    """nrm weights sum to one whenever the raw sum is away from zero"""
    raw = np.array(raw)
    assume(abs(raw.sum()) > 1e-3)
    assert effective_weights(raw, "nrm").sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(raw_weights)
def test_abs_weights_have_unit_l1(raw):
    """abs weights have absolute values summing to one"""
    raw = np.array(raw)
    assume(np.abs(raw).sum() > 1e-3)
    assert np.abs(effective_weights(raw, "abs")).sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(raw_weights)
def test_pos_weights_are_a_distribution(raw):
    """pos weights are non-negative and sum to one"""
    raw = np.array(raw)
    assume(np.maximum(raw, 0).sum() > 1e-3)
    weights = effective_weights(raw, "pos")
    assert (weights >= 0).all()
    assert weights.sum() == pytest.approx(1.0, abs=1e-6)


@settings(max_examples=200, deadline=None)
@given(raw_weights)
def test_soft_weights_are_a_distribution(raw):
    """soft weights are positive and sum to one for any raw vector"""
    weights = effective_weights(np.array(raw), "soft")
    assert (weights > 0).all()
    assert weights.sum() == pytest.approx(1.0, abs=1e-6)


def abu_with(weights, config="abu"):
    unit = make_activation(config, 1)
    for value, param in zip(weights, unit.alphas):
        param.values[()] = value
    return unit


@settings(max_examples=100, deadline=None)
@given(raw_weights, raw_weights)
def test_unconstrained_abu_is_linear_in_weights(a, b):
    """Without normalization the blend of a + b is the sum of the two blends"""
    x = np.linspace(-3, 3, 61)
    combined = eval_abu(abu_with(np.add(a, b)), x)
    np.testing.assert_allclose(combined, eval_abu(abu_with(a), x) + eval_abu(abu_with(b), x), atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(raw_weights, st.floats(min_value=0.1, max_value=10.0), st.sampled_from(["nrm", "abs", "pos"]))
def test_normalization_ignores_positive_scale(raw, scale, mode):
    """nrm, abs and pos give the same weights for w and c*w with c > 0"""
    raw = np.array(raw)
    denominators = {"nrm": raw.sum(), "abs": np.abs(raw).sum(), "pos": np.maximum(raw, 0).sum()}
    assume(abs(denominators[mode]) > 1e-3)
    np.testing.assert_allclose(effective_weights(scale * raw, mode), effective_weights(raw, mode),
                               rtol=1e-6, atol=1e-9)


@settings(max_examples=200, deadline=None)
@given(raw_weights, st.floats(min_value=-50.0, max_value=50.0))
def test_soft_ignores_additive_shift(raw, shift):
    """soft weights are unchanged when every raw weight moves by the same amount"""
    raw = np.array(raw)
    np.testing.assert_allclose(effective_weights(raw + shift, "soft"), effective_weights(raw, "soft"), atol=1e-9)


@pytest.mark.parametrize("name", FIXED_ACTIVATIONS)
def test_unit_scale_matches_base(name):
    """A scaled activation at its initial alpha of 1 is the base function"""
    x = np.random.default_rng(2).normal(scale=3.0, size=(50, 4))
    scaled = make_activation(f"a_{name}", 1)
    fixed = make_activation(name, 1)
    np.testing.assert_array_equal(scaled.evaluate(x), fixed.evaluate(x))
    np.testing.assert_array_equal(scaled(Tape(), Tensor(x)).values, fixed.evaluate(x))


@pytest.mark.parametrize("member", range(5))
def test_abu_one_hot_recovers_every_member(member):
    """One-hot blending weights reproduce each base function on random inputs"""
    x = np.random.default_rng(member).normal(scale=3.0, size=10_000)
    unit = abu_with([1.0 if j == member else 0.0 for j in range(5)])
    np.testing.assert_array_equal(eval_abu(unit, x), eval_base(ABU_MEMBERS[member], x, 1.0))


def test_selu_is_self_normalizing():
    """Standard normal inputs leave SELU with mean near 0 and variance near 1"""
    y = eval_base("selu", np.random.default_rng(0).normal(size=200_000))
    assert y.mean() == pytest.approx(0.0, abs=0.02)
    assert y.var() == pytest.approx(1.0, abs=0.02)


def test_degenerate_nrm():
    """A vanishing raw sum is reported with the layer index"""
    with pytest.raises(DegenerateNormalizationError) as exc:
        effective_weights(np.array([1.0, -1.0, 0.0, 0.0, 0.0]), "nrm", layer_index=4)
    assert exc.value.layer_index == 4
    assert exc.value.mode is NormMode.NRM


def test_degenerate_pos():
    """All non-positive raw weights cannot be pos-normalized"""
    with pytest.raises(DegenerateNormalizationError):
        effective_weights(-np.ones(5), "pos")


def test_none_mode_is_identity():
    """Unconstrained ABU weights pass through unchanged"""
    raw = np.array([0.5, -2.0, 1.0, 0.0, 3.0])
    np.testing.assert_array_equal(effective_weights(raw, "none"), raw)


def test_normalization_examples():
    """Hand-checked abs and pos normalizations"""
    np.testing.assert_allclose(effective_weights(np.array([0.3, -0.3, 0.2, 0.1, 0.1]), "abs"),
                               [0.3, -0.3, 0.2, 0.1, 0.1])
    np.testing.assert_allclose(effective_weights(np.array([0.5, -0.2, 0.5, 0.0, 0.0]), "pos"),
                               [0.5, 0.0, 0.5, 0.0, 0.0])
    np.testing.assert_allclose(effective_weights(np.full(5, 0.2), "soft"), np.full(5, 0.2))


def test_swish_beta_derivative():
    """d swish / d beta at x=1, beta=1 is sigma(1)(1 - sigma(1))"""
    _, dbeta = grad_base("swish", np.array([1.0]), 1.0)
    assert dbeta[0] == pytest.approx(0.196612, abs=1e-6)
    dx, none = grad_base("relu", np.array([-1.0, 2.0]))
    np.testing.assert_array_equal(dx, [0.0, 1.0])
    assert none is None


def test_abu_mixed_weights():
    """An ABU with signed weights matches an independent scalar evaluation"""
    unit = make_activation("abu", 1)
    for value, param in zip([0.1, 0.3, -0.2, 0.4, 0.1], unit.alphas):
        param.values[()] = value
    expected = 0.1 * np.tanh(1.0) + 0.3 * 1.0 - 0.2 * 1.0 + 0.4 * 1.0 + 0.1 * (1.0 / (1.0 + np.exp(-1.0)))
    assert eval_abu(unit, np.array([1.0]))[0] == pytest.approx(expected)
    assert eval_abu(make_activation("abu", 1), np.array([0.0]))[0] == 0.0


if __name__ == '__main__':
    pytest.main(['-v', __file__])
