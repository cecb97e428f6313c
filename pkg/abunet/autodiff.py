"""
Reverse-mode automatic differentiation over dense numpy tensors.

A Tape records every primitive applied to tensors that require gradients.
backward() walks the tape once in reverse and returns the gradient of a
scalar loss with respect to every leaf tensor that requires gradients.
Convolution uses explicit patch expansion (im2col) and all layouts are
batch-height-width-channel.
"""
import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

_tensor_ids = itertools.count(1)


class ShapeError(ValueError):
    """Raised when a primitive receives inputs of incompatible shapes."""
    def __init__(self, primitive: str, *shapes: Tuple[int, ...], detail: str = ""):
        self.primitive = primitive
        self.shapes = shapes
        rendered = " and ".join(str(tuple(s)) for s in shapes)
        message = f"{primitive}: incompatible shapes {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class TapeError(RuntimeError):
    """Raised for misuse of the tape (backward before forward, non-scalar loss)."""


class NonFiniteError(ArithmeticError):
    """Raised when a forward pass produces NaN or Inf."""
    def __init__(self, primitive: str, layer: Optional[str] = None):
        self.primitive = primitive
        self.layer = layer
        where = f" in layer '{layer}'" if layer else ""
        super().__init__(f"Non-finite values produced by {primitive}{where}")


class Tensor:
    """Dense value array with a paired gradient accumulator."""

    def __init__(self, values, requires_grad: bool = False, name: Optional[str] = None):
        values = np.asarray(values)
        if not np.issubdtype(values.dtype, np.floating):
            values = values.astype(np.float64)
        self.values = values
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.name = name
        self.id = next(_tensor_ids)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self) -> np.dtype:
        return self.values.dtype

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.values.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label}, requires_grad={self.requires_grad})"


@dataclass
class Parameter:
    """A trainable tensor with a hierarchical name such as "conv1/kernel" or "act3/alpha"."""
    name: str
    tensor: Tensor
    trainable: bool = True

    @classmethod
    def create(cls, name: str, values, dtype=np.float64) -> "Parameter":
        return cls(name=name, tensor=Tensor(np.array(values, dtype=dtype), requires_grad=True, name=name))

    @property
    def id(self) -> int:
        return self.tensor.id

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values

    @property
    def size(self) -> int:
        return int(self.tensor.values.size)


class Primitive:
    """
    Base class for differentiable operations.

    forward() returns the output array and a dict of saved intermediates;
    backward() maps the output gradient to one gradient (or None) per input.
    """
    name = "primitive"

    def check(self, *arrays: np.ndarray) -> None:
        pass

    def forward(self, *arrays: np.ndarray) -> Tuple[np.ndarray, dict]:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, saved: dict) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to the input's shape."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def _broadcast_check(name: str, a: np.ndarray, b: np.ndarray) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(name, a.shape, b.shape)


class Add(Primitive):
    name = "add"

    def check(self, a, b):
        _broadcast_check(self.name, a, b)

    def forward(self, a, b):
        return a + b, {"shapes": (a.shape, b.shape)}

    def backward(self, grad, saved):
        sa, sb = saved["shapes"]
        return _unbroadcast(grad, sa), _unbroadcast(grad, sb)


class Mul(Primitive):
    name = "mul"

    def check(self, a, b):
        _broadcast_check(self.name, a, b)

    def forward(self, a, b):
        return a * b, {"a": a, "b": b}

    def backward(self, grad, saved):
        a, b = saved["a"], saved["b"]
        return _unbroadcast(grad * b, a.shape), _unbroadcast(grad * a, b.shape)


class ScalarMul(Primitive):
    name = "scalar-mul"

    def __init__(self, factor: float):
        self.factor = factor

    def forward(self, a):
        return a * self.factor, {}

    def backward(self, grad, saved):
        return (grad * self.factor,)


class MatMul(Primitive):
    name = "matmul"

    def check(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self.name, a.shape, b.shape)

    def forward(self, a, b):
        return a @ b, {"a": a, "b": b}

    def backward(self, grad, saved):
        a, b = saved["a"], saved["b"]
        return grad @ b.T, a.T @ grad


def _same_padding(extent: int, window: int, stride: int) -> Tuple[int, Tuple[int, int]]:
    """Output extent and (before, after) padding of a 'same' window op."""
    out = -(-extent // stride)
    total = max((out - 1) * stride + window - extent, 0)
    return out, (total // 2, total - total // 2)


class Conv2D(Primitive):
    """Stride-1 zero-padded ('same') convolution, input [B,H,W,C], kernel [kh,kw,C,O]."""
    name = "conv2d"

    def check(self, x, w):
        if x.ndim != 4 or w.ndim != 4 or x.shape[3] != w.shape[2]:
            raise ShapeError(self.name, x.shape, w.shape)

    def forward(self, x, w):
        batch, height, width, channels = x.shape
        kh, kw, _, out_channels = w.shape
        _, pad_h = _same_padding(height, kh, 1)
        _, pad_w = _same_padding(width, kw, 1)
        padded = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0)))
        # [B,H,W,C,kh,kw] -> rows of kh*kw*C patch values
        cols = sliding_window_view(padded, (kh, kw), axis=(1, 2))
        cols = cols.transpose(0, 1, 2, 4, 5, 3).reshape(batch * height * width, kh * kw * channels)
        kernel = w.reshape(kh * kw * channels, out_channels)
        out = (cols @ kernel).reshape(batch, height, width, out_channels)
        return out, {"cols": cols, "w": w, "x_shape": x.shape, "pads": (pad_h, pad_w), "padded_shape": padded.shape}

    def backward(self, grad, saved):
        cols, w = saved["cols"], saved["w"]
        batch, height, width, channels = saved["x_shape"]
        kh, kw, _, out_channels = w.shape
        (top, _), (left, _) = saved["pads"]
        flat = grad.reshape(-1, out_channels)
        dw = (cols.T @ flat).reshape(w.shape)
        dcols = (flat @ w.reshape(kh * kw * channels, out_channels).T).reshape(batch, height, width, kh, kw, channels)
        dpadded = np.zeros(saved["padded_shape"], dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dpadded[:, i:i + height, j:j + width, :] += dcols[:, :, :, i, j, :]
        return dpadded[:, top:top + height, left:left + width, :], dw


class _Pool(Primitive):
    """Shared window bookkeeping for 'same'-padded pooling."""

    def __init__(self, window: int = 3, stride: int = 2):
        self.window = window
        self.stride = stride

    def check(self, x):
        if x.ndim != 4:
            raise ShapeError(self.name, x.shape, detail="expected [B,H,W,C]")

    def _geometry(self, x):
        oh, pad_h = _same_padding(x.shape[1], self.window, self.stride)
        ow, pad_w = _same_padding(x.shape[2], self.window, self.stride)
        return oh, ow, pad_h, pad_w

    def _slices(self, oh: int, ow: int):
        span_h = self.stride * (oh - 1) + 1
        span_w = self.stride * (ow - 1) + 1
        for di in range(self.window):
            for dj in range(self.window):
                yield (slice(None), slice(di, di + span_h, self.stride), slice(dj, dj + span_w, self.stride), slice(None))

    @staticmethod
    def _crop(padded, pad_h, pad_w, height, width):
        return padded[:, pad_h[0]:pad_h[0] + height, pad_w[0]:pad_w[0] + width, :]


class MaxPool(_Pool):
    name = "max-pool"

    def forward(self, x):
        oh, ow, pad_h, pad_w = self._geometry(x)
        padded = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0)), constant_values=-np.inf)
        stacked = np.stack([padded[s] for s in self._slices(oh, ow)])
        arg = stacked.argmax(axis=0)
        out = np.take_along_axis(stacked, arg[None], axis=0)[0]
        return out, {"arg": arg, "x_shape": x.shape, "padded_shape": padded.shape, "geometry": (oh, ow, pad_h, pad_w)}

    def backward(self, grad, saved):
        oh, ow, pad_h, pad_w = saved["geometry"]
        arg = saved["arg"]
        dpadded = np.zeros(saved["padded_shape"], dtype=grad.dtype)
        for index, s in enumerate(self._slices(oh, ow)):
            dpadded[s] += np.where(arg == index, grad, 0)
        _, height, width, _ = saved["x_shape"]
        return (self._crop(dpadded, pad_h, pad_w, height, width),)


class AvgPool(_Pool):
    """Average over the in-bounds part of each window (padding excluded from the count)."""
    name = "avg-pool"

    def forward(self, x):
        oh, ow, pad_h, pad_w = self._geometry(x)
        padded = np.pad(x, ((0, 0), pad_h, pad_w, (0, 0)))
        inside = np.pad(np.ones((1,) + x.shape[1:3] + (1,), dtype=x.dtype), ((0, 0), pad_h, pad_w, (0, 0)))
        total = sum(padded[s] for s in self._slices(oh, ow))
        counts = sum(inside[s] for s in self._slices(oh, ow))
        return total / counts, {"counts": counts, "x_shape": x.shape, "padded_shape": padded.shape,
                                "geometry": (oh, ow, pad_h, pad_w)}

    def backward(self, grad, saved):
        oh, ow, pad_h, pad_w = saved["geometry"]
        share = grad / saved["counts"]
        dpadded = np.zeros(saved["padded_shape"], dtype=grad.dtype)
        for s in self._slices(oh, ow):
            dpadded[s] += share
        _, height, width, _ = saved["x_shape"]
        return (self._crop(dpadded, pad_h, pad_w, height, width),)


class Reshape(Primitive):
    name = "reshape"

    def __init__(self, shape: Tuple[int, ...]):
        self.shape = shape

    def check(self, a):
        try:
            np.empty(a.shape, dtype=np.bool_).reshape(self.shape)
        except ValueError:
            raise ShapeError(self.name, a.shape, self.shape)

    def forward(self, a):
        return a.reshape(self.shape), {"shape": a.shape}

    def backward(self, grad, saved):
        return (grad.reshape(saved["shape"]),)


class Sum(Primitive):
    name = "sum"

    def forward(self, a):
        return np.asarray(a.sum()), {"shape": a.shape}

    def backward(self, grad, saved):
        return (np.broadcast_to(grad, saved["shape"]).copy(),)


class Stack(Primitive):
    """Stack equally shaped inputs along a new leading axis."""
    name = "stack"

    def check(self, *arrays):
        shapes = {a.shape for a in arrays}
        if len(shapes) > 1:
            raise ShapeError(self.name, *sorted(shapes))

    def forward(self, *arrays):
        return np.stack(arrays), {"count": len(arrays)}

    def backward(self, grad, saved):
        return tuple(grad[i] for i in range(saved["count"]))


class Dropout(Primitive):
    """Inverted dropout with an externally supplied keep-mask."""
    name = "dropout"

    def __init__(self, mask: np.ndarray, rate: float):
        self.mask = mask
        self.rate = rate

    def check(self, x):
        if self.mask.shape != x.shape:
            raise ShapeError(self.name, x.shape, self.mask.shape, detail="mask must match input")

    def forward(self, x):
        return x * self.mask / (1.0 - self.rate), {}

    def backward(self, grad, saved):
        return (grad * self.mask / (1.0 - self.rate),)


class SoftmaxCrossEntropy(Primitive):
    """Mean cross-entropy of logits [B,C] against integer labels [B]."""
    name = "softmax-cross-entropy"

    def __init__(self, labels: np.ndarray):
        self.labels = np.asarray(labels, dtype=np.int64)

    def check(self, logits):
        if logits.ndim != 2 or self.labels.shape != (logits.shape[0],):
            raise ShapeError(self.name, logits.shape, self.labels.shape)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= logits.shape[1]):
            raise ShapeError(self.name, logits.shape, self.labels.shape, detail="label out of range")

    def forward(self, logits):
        shifted = logits - logits.max(axis=1, keepdims=True)
        log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        rows = np.arange(logits.shape[0])
        loss = -log_probs[rows, self.labels].mean()
        return np.asarray(loss, dtype=logits.dtype), {"probs": np.exp(log_probs)}

    def backward(self, grad, saved):
        probs = saved["probs"].copy()
        rows = np.arange(probs.shape[0])
        probs[rows, self.labels] -= 1.0
        return (probs * (grad / probs.shape[0]),)


def sigmoid(x: np.ndarray) -> np.ndarray:
    """Logistic function without overflow at large |x|."""
    z = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))


# name -> (f(x), f'(x) given x and y=f(x))
UNARY: Dict[str, Tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda x, y: 1.0 - y * y),
    "relu": (lambda x: np.maximum(x, 0), lambda x, y: (x > 0).astype(x.dtype)),
    "sigmoid": (sigmoid, lambda x, y: y * (1.0 - y)),
    "exp": (np.exp, lambda x, y: y),
}


class Elementwise(Primitive):
    def __init__(self, kind: str):
        if kind not in UNARY:
            raise ValueError(f"Unknown elementwise primitive '{kind}'")
        self.kind = kind
        self.name = kind

    def forward(self, x):
        fn, _ = UNARY[self.kind]
        y = fn(x)
        return y, {"x": x, "y": y}

    def backward(self, grad, saved):
        _, dfn = UNARY[self.kind]
        return (grad * dfn(saved["x"], saved["y"]),)


@dataclass
class Node:
    primitive: Primitive
    inputs: Tuple[int, ...]
    output: int
    saved: dict = field(repr=False)


class Tape:
    """Ordered record of primitive applications; one forward/backward pair owns it."""

    def __init__(self):
        self.nodes: List[Node] = []
        self._tensors: Dict[int, Tensor] = {}
        self._outputs: set = set()

    def __len__(self) -> int:
        return len(self.nodes)

    def forward(self, primitive: Primitive, inputs: Sequence[Tensor]) -> Tensor:
        """Apply a primitive and record it when any input requires gradients."""
        arrays = [t.values for t in inputs]
        primitive.check(*arrays)
        out, saved = primitive.forward(*arrays)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError(primitive.name)
        result = Tensor(out, requires_grad=any(t.requires_grad for t in inputs))
        if result.requires_grad:
            for t in inputs:
                self._tensors[t.id] = t
            self._tensors[result.id] = result
            self._outputs.add(result.id)
            self.nodes.append(Node(primitive, tuple(t.id for t in inputs), result.id, saved))
        return result

    # Convenience wrappers, one per primitive

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        return self.forward(Add(), [a, b])

    def mul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.forward(Mul(), [a, b])

    def scale(self, a: Tensor, factor: float) -> Tensor:
        return self.forward(ScalarMul(factor), [a])

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        return self.forward(MatMul(), [a, b])

    def conv2d(self, x: Tensor, w: Tensor) -> Tensor:
        return self.forward(Conv2D(), [x, w])

    def max_pool(self, x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
        return self.forward(MaxPool(window, stride), [x])

    def avg_pool(self, x: Tensor, window: int = 3, stride: int = 2) -> Tensor:
        return self.forward(AvgPool(window, stride), [x])

    def reshape(self, x: Tensor, shape: Tuple[int, ...]) -> Tensor:
        return self.forward(Reshape(tuple(shape)), [x])

    def flatten(self, x: Tensor) -> Tensor:
        return self.reshape(x, (x.shape[0], int(np.prod(x.shape[1:]))))

    def sum(self, x: Tensor) -> Tensor:
        return self.forward(Sum(), [x])

    def stack(self, tensors: Sequence[Tensor]) -> Tensor:
        return self.forward(Stack(), list(tensors))

    def dropout(self, x: Tensor, mask: np.ndarray, rate: float) -> Tensor:
        return self.forward(Dropout(mask, rate), [x])

    def softmax_xent(self, logits: Tensor, labels: np.ndarray) -> Tensor:
        return self.forward(SoftmaxCrossEntropy(labels), [logits])

    def unary(self, kind: str, x: Tensor) -> Tensor:
        return self.forward(Elementwise(kind), [x])

    def tanh(self, x: Tensor) -> Tensor:
        return self.unary("tanh", x)

    def relu(self, x: Tensor) -> Tensor:
        return self.unary("relu", x)

    def sigmoid(self, x: Tensor) -> Tensor:
        return self.unary("sigmoid", x)


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Back-propagate from a scalar loss.

    Args:
        tape: Tape holding the completed forward pass
        loss: Scalar tensor produced on this tape

    Returns:
        Gradient map from leaf tensor id to gradient array. The same gradients
        are also added into each leaf tensor's .grad accumulator.
    """
    if loss.values.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss.id not in tape._outputs:
        raise TapeError("backward called before a forward pass recorded this loss on the tape")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones_like(loss.values)}
    for node in reversed(tape.nodes):
        upstream = grads.get(node.output)
        if upstream is None:
            continue
        input_grads = node.primitive.backward(upstream, node.saved)
        for tensor_id, grad in zip(node.inputs, input_grads):
            if grad is None or not tape._tensors[tensor_id].requires_grad:
                continue
            grads[tensor_id] = grads[tensor_id] + grad if tensor_id in grads else grad

    result: Dict[int, np.ndarray] = {}
    for tensor_id, tensor in tape._tensors.items():
        if tensor_id in tape._outputs or not tensor.requires_grad or tensor_id not in grads:
            continue
        grad = grads[tensor_id]
        tensor.grad = grad.copy() if tensor.grad is None else tensor.grad + grad
        result[tensor_id] = grad
    return result


def finite_diff_grad(
    closure: Callable[[], float],
    params: Sequence,
    eps: float = 1e-5,
) -> Dict[int, np.ndarray]:
    """
    Central-difference gradient estimate (f(θ+ε) - f(θ-ε)) / 2ε per coordinate.

    The closure must be deterministic: dropout masks have to be frozen
    (passed explicitly) while checking.

    Args:
        closure: Re-evaluates the scalar objective from the current values
        params: Tensors or Parameters to perturb in place
        eps: Perturbation size, > 0

    Returns:
        Map from tensor id to estimated gradient
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    estimates: Dict[int, np.ndarray] = {}
    for param in params:
        tensor = param.tensor if isinstance(param, Parameter) else param
        values = tensor.values
        estimate = np.zeros(values.shape, dtype=np.float64)
        for index in np.ndindex(values.shape):
            original = values[index]
            values[index] = original + eps
            plus = float(closure())
            values[index] = original - eps
            minus = float(closure())
            values[index] = original
            estimate[index] = (plus - minus) / (2.0 * eps)
        estimates[tensor.id] = estimate
    return estimates
