"""
Activation functions: the six base functions, adaptive scaling and
Adaptive Blending Units (ABUs) with their normalized variants.

One scaling weight, or one blending vector, is shared by all units of a
layer. Normalization of blending weights is part of the differentiable
graph, so gradients reach the raw weights through it.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .autodiff import Parameter, Primitive, ShapeError, Tape, Tensor, sigmoid
from .constants import ELU_ALPHA, NORM_TAU, SELU_ALPHA, SELU_LAMBDA

logger = logging.getLogger(__name__)


class ActivationKind(str, Enum):
    IDENTITY = "identity"
    TANH = "tanh"
    RELU = "relu"
    ELU = "elu"
    SELU = "selu"
    SWISH = "swish"


class NormMode(str, Enum):
    NONE = "none"
    NRM = "nrm"
    ABS = "abs"
    POS = "pos"
    SOFT = "soft"


class ActivationConfigError(ValueError):
    """Raised for activation config strings that name no known activation."""


class DegenerateNormalizationError(ValueError):
    """Raised when a blending-weight normalization denominator falls below the threshold."""
    def __init__(self, mode: NormMode, denominator: float, layer_index: Optional[int] = None):
        self.mode = mode
        self.denominator = denominator
        self.layer_index = layer_index
        where = f"layer {layer_index}" if layer_index is not None else "ABU"
        super().__init__(
            f"Degenerate {mode.value} normalization in {where}: denominator {denominator:.3e} < {NORM_TAU:g}"
        )


@dataclass(frozen=True)
class BaseActivation:
    """A fixed activation function with its (non-trainable) constants."""
    kind: ActivationKind
    elu_alpha: float = ELU_ALPHA
    selu_lambda: float = SELU_LAMBDA
    selu_alpha: float = SELU_ALPHA

    def __post_init__(self):
        if self.elu_alpha != 1.0:
            raise ActivationConfigError("ELU alpha is fixed at 1.0")
        if not (self.selu_lambda > 1.0 and self.selu_alpha > 0.0):
            raise ActivationConfigError("SELU constants must satisfy lambda > 1, alpha > 0")


# Members of every ABU, in blending-weight order j = 1..5
ABU_MEMBERS: Tuple[BaseActivation, ...] = (
    BaseActivation(ActivationKind.TANH),
    BaseActivation(ActivationKind.ELU),
    BaseActivation(ActivationKind.RELU),
    BaseActivation(ActivationKind.IDENTITY),
    BaseActivation(ActivationKind.SWISH),
)
_SWISH_MEMBER = 4


def _as_base(base: Union[BaseActivation, ActivationKind, str]) -> BaseActivation:
    if isinstance(base, BaseActivation):
        return base
    return BaseActivation(ActivationKind(base))


def _negative_branch(x: np.ndarray, alpha: float) -> np.ndarray:
    return alpha * np.expm1(np.minimum(x, 0))


def eval_base(base, x: np.ndarray, beta: Optional[float] = None) -> np.ndarray:
    """
    Evaluate a base activation elementwise.

    Args:
        base: BaseActivation, ActivationKind or its name
        x: Input values
        beta: Swish shape parameter; required for Swish only

    Returns:
        f(x) with the same shape as x
    """
    base = _as_base(base)
    x = np.asarray(x)
    kind = base.kind
    if kind is ActivationKind.SWISH:
        if beta is None:
            raise ActivationConfigError("Swish needs a beta value")
        return x * sigmoid(beta * x)
    if kind is ActivationKind.IDENTITY:
        return x.copy()
    if kind is ActivationKind.RELU:
        return np.maximum(x, 0)
    if kind is ActivationKind.TANH:
        return np.tanh(x)
    if kind is ActivationKind.ELU:
        return np.where(x >= 0, x, _negative_branch(x, base.elu_alpha))
    return base.selu_lambda * np.where(x >= 0, x, _negative_branch(x, base.selu_alpha))


def grad_base(base, x: np.ndarray, beta: Optional[float] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Analytic df/dx and, for Swish, df/dbeta (None otherwise)."""
    base = _as_base(base)
    x = np.asarray(x)
    kind = base.kind
    if kind is ActivationKind.SWISH:
        if beta is None:
            raise ActivationConfigError("Swish needs a beta value")
        s = sigmoid(beta * x)
        slope = s * (1.0 - s)
        return s + beta * x * slope, x * x * slope
    if kind is ActivationKind.IDENTITY:
        return np.ones_like(x), None
    if kind is ActivationKind.RELU:
        return (x > 0).astype(x.dtype), None
    if kind is ActivationKind.TANH:
        t = np.tanh(x)
        return 1.0 - t * t, None
    negative = np.exp(np.minimum(x, 0))
    if kind is ActivationKind.ELU:
        return np.where(x >= 0, 1.0, base.elu_alpha * negative).astype(x.dtype), None
    return (base.selu_lambda * np.where(x >= 0, 1.0, base.selu_alpha * negative)).astype(x.dtype), None


def _denominator(raw: np.ndarray, mode: NormMode) -> float:
    if mode is NormMode.NRM:
        return float(raw.sum())
    if mode is NormMode.ABS:
        return float(np.abs(raw).sum())
    return float(np.maximum(raw, 0).sum())


def effective_weights(raw: np.ndarray, mode: Union[NormMode, str], layer_index: Optional[int] = None) -> np.ndarray:
    """
    Apply a blending-weight normalization.

    Args:
        raw: Raw blending weights, one per ABU member
        mode: none | nrm | abs | pos | soft
        layer_index: Layer named in a degenerate-normalization error

    Returns:
        Effective weights of the same length
    """
    mode = NormMode(mode)
    raw = np.asarray(raw)
    if mode is NormMode.NONE:
        return raw.copy()
    if mode is NormMode.SOFT:
        shifted = np.exp(raw - raw.max())
        return shifted / shifted.sum()
    denominator = _denominator(raw, mode)
    if abs(denominator) < NORM_TAU:
        raise DegenerateNormalizationError(mode, denominator, layer_index)
    if mode is NormMode.POS:
        return np.maximum(raw, 0) / denominator
    return raw / denominator


class BlendWeightsOp(Primitive):
    """In-graph normalization of a raw blending vector."""
    name = "blend-weights"

    def __init__(self, mode: NormMode, layer_index: Optional[int] = None):
        self.mode = NormMode(mode)
        self.layer_index = layer_index

    def check(self, raw):
        if raw.ndim != 1:
            raise ShapeError(self.name, raw.shape, detail="expected a weight vector")

    def forward(self, raw):
        weights = effective_weights(raw, self.mode, self.layer_index)
        denominator = None if self.mode in (NormMode.NONE, NormMode.SOFT) else _denominator(raw, self.mode)
        return weights, {"raw": raw, "weights": weights, "denominator": denominator}

    def backward(self, grad, saved):
        raw, weights, denominator = saved["raw"], saved["weights"], saved["denominator"]
        if self.mode is NormMode.NONE:
            return (grad,)
        projected = float(np.dot(grad, weights))
        if self.mode is NormMode.SOFT:
            return (weights * (grad - projected),)
        if self.mode is NormMode.NRM:
            return ((grad - projected) / denominator,)
        if self.mode is NormMode.ABS:
            return ((grad - np.sign(raw) * projected) / denominator,)
        # pos: zero subgradient through clipped entries
        return ((grad - projected) / denominator * (raw > 0),)


def blend(x: np.ndarray, weights: np.ndarray, beta: float) -> np.ndarray:
    """Σ_j w_j · f_j(x) over the ABU members."""
    out = weights[0] * eval_base(ABU_MEMBERS[0], x, beta)
    for weight, member in zip(weights[1:], ABU_MEMBERS[1:]):
        out = out + weight * eval_base(member, x, beta)
    return out


class BaseActivationOp(Primitive):
    """f(x) for one base function; Swish takes beta as a second input."""

    def __init__(self, base: BaseActivation):
        self.base = base
        self.name = base.kind.value

    def forward(self, x, beta=None):
        b = None if beta is None else float(beta)
        return eval_base(self.base, x, b), {"x": x, "beta": beta}

    def backward(self, grad, saved):
        x, beta = saved["x"], saved["beta"]
        dfdx, dfdbeta = grad_base(self.base, x, None if beta is None else float(beta))
        if beta is None:
            return (grad * dfdx,)
        return grad * dfdx, np.asarray((grad * dfdbeta).sum(), dtype=beta.dtype).reshape(beta.shape)


class BlendOp(Primitive):
    """ABU output from input x, effective weights w and the Swish member's beta."""
    name = "abu-blend"

    def check(self, x, weights, beta):
        if weights.shape != (len(ABU_MEMBERS),):
            raise ShapeError(self.name, weights.shape, (len(ABU_MEMBERS),))

    def forward(self, x, weights, beta):
        return blend(x, weights, float(beta)), {"x": x, "weights": weights, "beta": beta}

    def backward(self, grad, saved):
        x, weights, beta = saved["x"], saved["weights"], saved["beta"]
        b = float(beta)
        dx = np.zeros_like(x)
        dweights = np.zeros_like(weights)
        dbeta = 0.0
        for j, member in enumerate(ABU_MEMBERS):
            dfdx, dfdbeta = grad_base(member, x, b)
            dx = dx + weights[j] * dfdx * grad
            dweights[j] = (grad * eval_base(member, x, b)).sum()
            if dfdbeta is not None:
                dbeta = weights[j] * (grad * dfdbeta).sum()
        return dx, dweights, np.asarray(dbeta, dtype=beta.dtype).reshape(beta.shape)


@dataclass(frozen=True)
class ActivationConfig:
    """One layer's activation as named in run files: fixed, scaled (a_*) or ABU."""
    name: str
    family: str
    base: Optional[ActivationKind] = None
    norm_mode: NormMode = NormMode.NONE

    @classmethod
    def parse(cls, text: Union[str, "ActivationConfig"]) -> "ActivationConfig":
        if isinstance(text, ActivationConfig):
            return text
        key = str(text).strip().lower()
        if key.startswith("α"):
            key = "a_" + key[1:]
        if key == "abu":
            return cls(name=key, family="abu")
        if key.startswith("abu_"):
            suffix = key[4:]
            if suffix not in {m.value for m in NormMode if m is not NormMode.NONE}:
                raise ActivationConfigError(f"Unknown activation config '{text}'")
            return cls(name=key, family="abu", norm_mode=NormMode(suffix))
        family = "scaled" if key.startswith("a_") else "fixed"
        base_name = key[2:] if family == "scaled" else key
        try:
            base = ActivationKind(base_name)
        except ValueError:
            raise ActivationConfigError(f"Unknown activation config '{text}'")
        return cls(name=key, family=family, base=base)

    @property
    def is_adaptive(self) -> bool:
        return self.family in ("scaled", "abu")


class Activation:
    """Common interface of a layer's activation instance."""
    config: ActivationConfig
    layer_index: int

    def __init__(self, config: ActivationConfig, layer_index: int):
        self.config = config
        self.layer_index = layer_index
        self.parameters: Dict[str, Parameter] = {}

    def _param(self, role: str, value, dtype) -> Parameter:
        param = Parameter.create(f"act{self.layer_index}/{role}", value, dtype=dtype)
        self.parameters[param.name] = param
        return param

    def __call__(self, tape: Tape, x: Tensor) -> Tensor:
        raise NotImplementedError

    def evaluate(self, x: np.ndarray) -> np.ndarray:
        """Numpy evaluation with the current parameter values."""
        raise NotImplementedError

    @property
    def label(self) -> str:
        return self.config.name


class FixedActivation(Activation):
    """A base function; Swish still owns a trainable per-layer beta."""

    def __init__(self, config: ActivationConfig, layer_index: int, dtype=np.float64):
        super().__init__(config, layer_index)
        self.base = BaseActivation(config.base)
        self.beta = self._param("beta", 1.0, dtype) if config.base is ActivationKind.SWISH else None

    def __call__(self, tape, x):
        inputs = [x] if self.beta is None else [x, self.beta.tensor]
        return tape.forward(BaseActivationOp(self.base), inputs)

    def evaluate(self, x):
        beta = None if self.beta is None else float(self.beta.values)
        return eval_base(self.base, x, beta)


class ScaledActivation(FixedActivation):
    """α_i · f(x) with one trainable α_i per layer, initialized at 1."""

    def __init__(self, config: ActivationConfig, layer_index: int, dtype=np.float64):
        super().__init__(config, layer_index, dtype)
        self.alpha = self._param("alpha", 1.0, dtype)

    def __call__(self, tape, x):
        return tape.mul(super().__call__(tape, x), self.alpha.tensor)

    def evaluate(self, x):
        return self.alpha.values * super().evaluate(x)


class AbuUnit(Activation):
    """g_i(x) = Σ_j w_ij f_j(x), w = normalized raw blending weights (initialized at 1/m)."""

    def __init__(self, config: ActivationConfig, layer_index: int, dtype=np.float64):
        super().__init__(config, layer_index)
        self.norm_mode = config.norm_mode
        self.members = ABU_MEMBERS
        initial = 1.0 / len(ABU_MEMBERS)
        self.alphas: List[Parameter] = [self._param(f"alpha{j}", initial, dtype) for j in range(1, len(ABU_MEMBERS) + 1)]
        self.beta = self._param("beta", 1.0, dtype)

    def raw_weights(self) -> np.ndarray:
        return np.array([float(p.values) for p in self.alphas])

    def effective(self) -> np.ndarray:
        return effective_weights(self.raw_weights(), self.norm_mode, self.layer_index)

    def __call__(self, tape, x):
        raw = tape.stack([p.tensor for p in self.alphas])
        weights = tape.forward(BlendWeightsOp(self.norm_mode, self.layer_index), [raw])
        return tape.forward(BlendOp(), [x, weights, self.beta.tensor])

    def evaluate(self, x):
        weights = effective_weights(np.stack([p.values for p in self.alphas]), self.norm_mode, self.layer_index)
        return blend(np.asarray(x), weights, float(self.beta.values))


def eval_abu(unit: AbuUnit, x: np.ndarray) -> np.ndarray:
    """ABU output for numpy input using the unit's current weights."""
    return unit.evaluate(x)


def make_activation(config: Union[str, ActivationConfig], layer_index: int, dtype=np.float64) -> Activation:
    """
    Build one layer's activation with uniquely named parameters.

    Args:
        config: Activation config string (e.g. "relu", "a_tanh", "abu_soft")
        layer_index: Hidden layer index i, used in "act{i}/..." parameter names
        dtype: Parameter dtype

    Returns:
        Activation instance; its Parameters are in .parameters
    """
    config = ActivationConfig.parse(config)
    if config.family == "abu":
        return AbuUnit(config, layer_index, dtype)
    if config.family == "scaled":
        return ScaledActivation(config, layer_index, dtype)
    return FixedActivation(config, layer_index, dtype)


def activation_parameters(activations: Sequence[Activation]) -> Dict[str, Parameter]:
    params: Dict[str, Parameter] = {}
    for act in activations:
        params.update(act.parameters)
    return params
