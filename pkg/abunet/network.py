"""
Layer implementations and builders for the SMCN architecture family.

Layout is batch-height-width-channel. Every conv/dense hidden layer is
followed by its own activation (index i = 1..n); the classifier head is a
plain linear map. Pooling is 3x3 / stride 2 with 'same' padding, which
takes 32x32 inputs to 16x16 and then 8x8.
"""
import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .activations import Activation, ActivationConfig, make_activation
from .autodiff import NonFiniteError, Parameter, Primitive, ShapeError, Tape, Tensor
from .constants import (
    BIAS_INIT,
    BN_EPSILON,
    BN_MOMENTUM,
    CONV_CHANNELS,
    DENSE_UNITS,
    DROPOUT_RATE,
    FIRST_CONV_BIAS,
    IMAGE_CHANNELS,
    IMAGE_SIZE,
    POOL_STRIDE,
    POOL_WINDOW,
)

logger = logging.getLogger(__name__)

Probe = Callable[[int, np.ndarray], None]


class NetworkConfigError(ValueError):
    """Raised for unknown variants or inconsistent architecture settings."""


class BatchNormError(ValueError):
    """Raised when batch statistics cannot be formed."""


class Variant(str, Enum):
    SMCN = "smcn"
    SMCN10 = "smcn10"
    SMCN_S = "smcn_s"
    SMCN_BN = "smcn_bn"


class LayerKind(str, Enum):
    CONV2D = "conv2d"
    DENSE = "dense"
    MAX_POOL = "max_pool"
    AVG_POOL = "avg_pool"
    DROPOUT = "dropout"
    BATCH_NORM = "batch_norm"
    ACTIVATION = "activation"
    FLATTEN = "flatten"


@dataclass(frozen=True)
class LayerSpec:
    """One entry of a network's ordered layer list."""
    kind: LayerKind
    name: str
    kernel: Optional[Tuple[int, int]] = None
    in_channels: Optional[int] = None
    out_channels: Optional[int] = None
    in_dim: Optional[int] = None
    out_dim: Optional[int] = None
    window: int = POOL_WINDOW
    stride: int = 1
    rate: float = DROPOUT_RATE
    activation_index: Optional[int] = None


@dataclass
class BatchNormState:
    """Per-channel affine parameters and running statistics of one batch-norm layer."""
    gamma: Parameter
    beta: Parameter
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    epsilon: float = BN_EPSILON


class BatchNormOp(Primitive):
    """Batch normalization over every axis but the channel axis."""
    name = "batch-norm"

    def __init__(self, epsilon: float, mean: Optional[np.ndarray] = None, var: Optional[np.ndarray] = None):
        self.epsilon = epsilon
        self.mean = mean
        self.var = var

    def check(self, x, gamma, beta):
        if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
            raise ShapeError(self.name, x.shape, gamma.shape)

    def forward(self, x, gamma, beta):
        axes = tuple(range(x.ndim - 1))
        training = self.mean is None
        mean = x.mean(axis=axes) if training else self.mean
        var = x.var(axis=axes) if training else self.var
        inv_std = 1.0 / np.sqrt(var + self.epsilon)
        xhat = (x - mean) * inv_std
        saved = {"xhat": xhat, "inv_std": inv_std, "gamma": gamma, "training": training,
                 "batch_mean": mean, "batch_var": var}
        return (xhat * gamma + beta).astype(x.dtype), saved

    def backward(self, grad, saved):
        return batchnorm_backward(grad, saved)


def batchnorm_backward(grad: np.ndarray, saved: dict) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of batch norm with respect to (x, gamma, beta)."""
    xhat, inv_std, gamma = saved["xhat"], saved["inv_std"], saved["gamma"]
    axes = tuple(range(grad.ndim - 1))
    dgamma = (grad * xhat).sum(axis=axes)
    dbeta = grad.sum(axis=axes)
    dxhat = grad * gamma
    if not saved["training"]:
        return dxhat * inv_std, dgamma, dbeta
    count = xhat.size // xhat.shape[-1]
    dx = inv_std / count * (
        count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
    )
    return dx, dgamma, dbeta


def batchnorm_forward(state: BatchNormState, tape: Tape, x: Tensor, mode: str) -> Tensor:
    """
    Normalize with batch statistics (train) or running statistics (eval).

    Train mode also updates the running statistics.
    """
    if mode == "train":
        if x.shape[0] < 2:
            raise BatchNormError("Batch normalization in train mode needs a batch of at least 2")
        op = BatchNormOp(state.epsilon)
        y = tape.forward(op, [x, state.gamma.tensor, state.beta.tensor])
        axes = tuple(range(x.values.ndim - 1))
        batch_mean = x.values.mean(axis=axes)
        batch_var = x.values.var(axis=axes)
        state.running_mean = state.momentum * state.running_mean + (1.0 - state.momentum) * batch_mean
        state.running_var = state.momentum * state.running_var + (1.0 - state.momentum) * batch_var
        return y
    op = BatchNormOp(state.epsilon, mean=state.running_mean, var=state.running_var)
    return tape.forward(op, [x, state.gamma.tensor, state.beta.tensor])


def he_init(shape: Sequence[int], fan_in: int, rng: np.random.Generator) -> np.ndarray:
    """Samples from Normal(0, sqrt(2 / fan_in))."""
    if fan_in <= 0:
        raise ValueError(f"fan_in must be positive, got {fan_in}")
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(shape))


@dataclass
class NetworkSpec:
    """An instantiated SMCN: ordered layers plus the parameter registry."""
    variant: Variant
    num_classes: int
    activation: ActivationConfig
    layers: List[LayerSpec]
    parameters: Dict[str, Parameter]
    activations: Dict[int, Activation]
    batchnorms: Dict[str, BatchNormState]
    dtype: np.dtype
    conv_channels: int = CONV_CHANNELS
    dense_units: Tuple[int, int] = DENSE_UNITS
    image_size: int = IMAGE_SIZE
    bn_placement: str = "before"
    seed: int = 0

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters.values())

    def trainable_parameters(self) -> List[Parameter]:
        return [p for p in self.parameters.values() if p.trainable]

    def activation_parameter_names(self) -> List[str]:
        return [name for name in self.parameters if name.startswith("act")]

    def zero_grad(self) -> None:
        for param in self.parameters.values():
            param.tensor.zero_grad()

    def count_layers(self, kind: LayerKind) -> int:
        return sum(1 for layer in self.layers if layer.kind is kind)

    def metadata(self) -> dict:
        """Architecture description sufficient to rebuild this network."""
        return {
            "variant": self.variant.value,
            "activation": self.activation.name,
            "num_classes": self.num_classes,
            "conv_channels": self.conv_channels,
            "dense_units": list(self.dense_units),
            "image_size": self.image_size,
            "bn_placement": self.bn_placement,
            "dtype": np.dtype(self.dtype).name,
            "seed": self.seed,
        }


class _Builder:
    """Accumulates layers and He-initialized parameters in build order."""

    def __init__(self, variant: Variant, activation: ActivationConfig, rng: np.random.Generator, dtype, bn_placement: str):
        self.variant = variant
        self.activation = activation
        self.rng = rng
        self.dtype = dtype
        self.bn_placement = bn_placement
        self.layers: List[LayerSpec] = []
        self.parameters: Dict[str, Parameter] = {}
        self.activations: Dict[int, Activation] = {}
        self.batchnorms: Dict[str, BatchNormState] = {}
        self.hidden = 0
        self.convs = 0
        self.denses = 0

    @property
    def uses_dropout(self) -> bool:
        return self.variant in (Variant.SMCN, Variant.SMCN10)

    def _add_param(self, name: str, values: np.ndarray) -> None:
        self.parameters[name] = Parameter.create(name, values, dtype=self.dtype)

    def _linear(self, kind: LayerKind, name: str, shape: Tuple[int, ...], fan_in: int, bias: float, **dims) -> None:
        self._add_param(f"{name}/kernel", he_init(shape, fan_in, self.rng))
        self._add_param(f"{name}/bias", np.full(shape[-1], bias))
        self.layers.append(LayerSpec(kind=kind, name=name, **dims))

    def _activate(self) -> None:
        self.hidden += 1
        index = self.hidden
        channels = self.layers[-1].out_channels or self.layers[-1].out_dim
        use_bn = self.variant is Variant.SMCN_BN
        if use_bn and self.bn_placement == "before":
            self._batchnorm(index, channels)
        act = make_activation(self.activation, index, dtype=self.dtype)
        self.activations[index] = act
        self.parameters.update(act.parameters)
        self.layers.append(LayerSpec(kind=LayerKind.ACTIVATION, name=f"act{index}", activation_index=index))
        if use_bn and self.bn_placement == "after":
            self._batchnorm(index, channels)

    def _batchnorm(self, index: int, channels: int) -> None:
        name = f"bn{index}"
        self._add_param(f"{name}/gamma", np.ones(channels))
        self._add_param(f"{name}/beta", np.zeros(channels))
        self.batchnorms[name] = BatchNormState(
            gamma=self.parameters[f"{name}/gamma"],
            beta=self.parameters[f"{name}/beta"],
            running_mean=np.zeros(channels, dtype=self.dtype),
            running_var=np.ones(channels, dtype=self.dtype),
        )
        self.layers.append(LayerSpec(kind=LayerKind.BATCH_NORM, name=name, out_channels=channels))

    def conv(self, size: int, in_channels: int, out_channels: int) -> None:
        self.convs += 1
        bias = FIRST_CONV_BIAS if self.convs == 1 else BIAS_INIT
        self._linear(
            LayerKind.CONV2D, f"conv{self.convs}", (size, size, in_channels, out_channels), size * size * in_channels,
            bias, kernel=(size, size), in_channels=in_channels, out_channels=out_channels,
        )
        self._activate()

    def dense(self, in_dim: int, out_dim: int, hidden: bool = True) -> None:
        if hidden:
            self.denses += 1
            name = f"dense{self.denses}"
        else:
            name = "logits"
        self._linear(LayerKind.DENSE, name, (in_dim, out_dim), in_dim, BIAS_INIT, in_dim=in_dim, out_dim=out_dim)
        if hidden:
            self._activate()

    def dropout(self) -> None:
        if self.uses_dropout:
            self.layers.append(LayerSpec(kind=LayerKind.DROPOUT, name=f"dropout{self.hidden}", rate=DROPOUT_RATE))

    def pool(self, index: int) -> None:
        kind = LayerKind.AVG_POOL if self.variant is Variant.SMCN_S else LayerKind.MAX_POOL
        self.layers.append(LayerSpec(kind=kind, name=f"pool{index}", window=POOL_WINDOW, stride=POOL_STRIDE))

    def flatten(self) -> None:
        self.layers.append(LayerSpec(kind=LayerKind.FLATTEN, name="flatten"))


def pooled_extent(size: int) -> int:
    """Spatial extent after one 'same' pooling with stride 2."""
    return -(-size // POOL_STRIDE)


def build_smcn(
    variant: Union[Variant, str],
    activation: Union[str, ActivationConfig],
    num_classes: int = 10,
    seed: int = 0,
    *,
    conv_channels: int = CONV_CHANNELS,
    dense_units: Sequence[int] = DENSE_UNITS,
    image_size: int = IMAGE_SIZE,
    bn_placement: str = "before",
    dtype=np.float32,
) -> NetworkSpec:
    """
    Build one SMCN variant.

    Args:
        variant: smcn | smcn10 | smcn_s | smcn_bn
        activation: Activation config string used in every hidden layer
        num_classes: 10 or 100 for CIFAR (any positive count is accepted)
        seed: Seed of the He initialization
        conv_channels: Filters per conv layer (64 in the full network)
        dense_units: Widths of the two hidden dense layers
        image_size: Input height/width
        bn_placement: "before" or "after" the activation (SMCN_BN only)
        dtype: Parameter dtype

    Returns:
        NetworkSpec with He-initialized weights
    """
    try:
        variant = Variant(variant)
    except ValueError:
        raise NetworkConfigError(f"Unknown SMCN variant '{variant}'")
    if bn_placement not in ("before", "after"):
        raise NetworkConfigError(f"bn_placement must be 'before' or 'after', got '{bn_placement}'")
    dense_units = tuple(int(u) for u in dense_units)
    if len(dense_units) != 2 or min(dense_units) <= 0 or conv_channels <= 0 or num_classes <= 0 or image_size <= 0:
        raise NetworkConfigError("Layer widths, image size and class count must be positive")

    config = ActivationConfig.parse(activation)
    dtype = np.dtype(dtype)
    builder = _Builder(variant, config, np.random.default_rng(seed), dtype, bn_placement)
    channels = conv_channels

    builder.conv(5, IMAGE_CHANNELS, channels)
    builder.dropout()
    builder.conv(3, channels, channels)
    builder.pool(1)
    for _ in range(3 if variant is Variant.SMCN10 else 1):
        builder.conv(1, channels, channels)
        builder.dropout()
        builder.conv(5, channels, channels)
    builder.pool(2)
    builder.flatten()

    spatial = pooled_extent(pooled_extent(image_size))
    flat_dim = spatial * spatial * channels
    builder.dense(flat_dim, dense_units[0])
    builder.dropout()
    builder.dense(dense_units[0], dense_units[1])
    builder.dense(dense_units[1], num_classes, hidden=False)

    net = NetworkSpec(
        variant=variant,
        num_classes=num_classes,
        activation=config,
        layers=builder.layers,
        parameters=builder.parameters,
        activations=builder.activations,
        batchnorms=builder.batchnorms,
        dtype=dtype,
        conv_channels=conv_channels,
        dense_units=dense_units,
        image_size=image_size,
        bn_placement=bn_placement,
        seed=seed,
    )
    logger.debug(f"Built {variant.value} with {config.name}: {net.param_count()} parameters, {builder.hidden} hidden layers")
    return net


def _apply_layer(
    net: NetworkSpec,
    layer: LayerSpec,
    tape: Tape,
    x: Tensor,
    mode: str,
    rng: Optional[np.random.Generator],
    probe: Optional[Probe],
    masks: Optional[Dict[str, np.ndarray]],
) -> Tensor:
    params = net.parameters
    kind = layer.kind
    if kind is LayerKind.CONV2D:
        return tape.add(tape.conv2d(x, params[f"{layer.name}/kernel"].tensor), params[f"{layer.name}/bias"].tensor)
    if kind is LayerKind.DENSE:
        return tape.add(tape.matmul(x, params[f"{layer.name}/kernel"].tensor), params[f"{layer.name}/bias"].tensor)
    if kind is LayerKind.MAX_POOL:
        return tape.max_pool(x, layer.window, layer.stride)
    if kind is LayerKind.AVG_POOL:
        return tape.avg_pool(x, layer.window, layer.stride)
    if kind is LayerKind.FLATTEN:
        return tape.flatten(x)
    if kind is LayerKind.BATCH_NORM:
        return batchnorm_forward(net.batchnorms[layer.name], tape, x, mode)
    if kind is LayerKind.ACTIVATION:
        if probe is not None:
            probe(layer.activation_index, x.values)
        return net.activations[layer.activation_index](tape, x)
    # dropout
    if mode != "train":
        return x
    mask = None if masks is None else masks.get(layer.name)
    if mask is None:
        if rng is None:
            raise NetworkConfigError("Train-mode dropout needs an rng or frozen masks")
        mask = rng.random(x.shape) >= layer.rate
        if masks is not None:
            masks[layer.name] = mask
    return tape.dropout(x, mask, layer.rate)


def forward_net(
    net: NetworkSpec,
    batch: Union[np.ndarray, Tensor],
    mode: str = "eval",
    rng: Optional[np.random.Generator] = None,
    probe: Optional[Probe] = None,
    masks: Optional[Dict[str, np.ndarray]] = None,
    tape: Optional[Tape] = None,
) -> Tensor:
    """
    Run a batch through the network.

    Args:
        net: Network to evaluate
        batch: Images [B, H, W, 3]
        mode: "train" (dropout active, batch statistics) or "eval"
        rng: Source of dropout masks in train mode
        probe: Called with (activation index, pre-activation values) per hidden layer
        masks: Frozen dropout masks by layer name; missing entries are drawn and stored
        tape: Tape to record on (a fresh one when omitted)

    Returns:
        Logits tensor [B, num_classes]
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got '{mode}'")
    tape = tape if tape is not None else Tape()
    x = batch if isinstance(batch, Tensor) else Tensor(np.asarray(batch, dtype=net.dtype))
    expected = (net.image_size, net.image_size, IMAGE_CHANNELS)
    if x.values.ndim != 4 or x.shape[1:] != expected:
        raise ShapeError("forward_net", x.shape, (None,) + expected)

    for layer in net.layers:
        try:
            x = _apply_layer(net, layer, tape, x, mode, rng, probe, masks)
        except NonFiniteError as err:
            logger.error(f"Non-finite values in layer {layer.name}")
            raise NonFiniteError(err.primitive, layer=layer.name) from err
    return x
