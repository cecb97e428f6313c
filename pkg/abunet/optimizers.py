"""
Adam and heavy-ball Momentum updates over named Parameters.

Updates are applied in place to each parameter's value array, so tensor
identities (and therefore the network's parameter registry) never change.
Frozen parameters are simply left out of the list passed to a step.
"""
import logging
from dataclasses import dataclass, field
from typing import ClassVar, Dict, Mapping, Optional, Sequence

import numpy as np

from .autodiff import Parameter
from .constants import (
    ADAM_BETA1,
    ADAM_BETA2,
    ADAM_EPS,
    ADAM_LR,
    MOMENTUM_LR_END,
    MOMENTUM_LR_START,
    MOMENTUM_MU,
)

logger = logging.getLogger(__name__)

Grads = Mapping[str, Optional[np.ndarray]]


class TrainingError(RuntimeError):
    """Raised when a training step cannot proceed (NaN gradient or loss, bad step index)."""
    def __init__(self, message: str, step: Optional[int] = None, parameter: Optional[str] = None):
        self.step = step
        self.parameter = parameter
        where = []
        if step is not None:
            where.append(f"step {step}")
        if parameter is not None:
            where.append(f"parameter '{parameter}'")
        suffix = f" ({', '.join(where)})" if where else ""
        super().__init__(f"{message}{suffix}")


def _checked_grad(param: Parameter, grads: Grads, step: int) -> np.ndarray:
    grad = grads.get(param.name)
    if grad is None:
        raise TrainingError("Missing gradient", step=step, parameter=param.name)
    if not np.all(np.isfinite(grad)):
        raise TrainingError("Non-finite gradient", step=step, parameter=param.name)
    return grad


@dataclass
class OptimizerState:
    """Common bookkeeping: update counter and per-parameter slot arrays."""
    kind: ClassVar[str] = "optimizer"
    t: int = 0

    def slots(self) -> Dict[str, Dict[str, np.ndarray]]:
        raise NotImplementedError

    def hyperparameters(self) -> dict:
        raise NotImplementedError

    def step(self, params: Sequence[Parameter], grads: Grads) -> None:
        raise NotImplementedError


@dataclass
class AdamState(OptimizerState):
    kind: ClassVar[str] = "adam"
    lr: float = ADAM_LR
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)

    def slots(self):
        return {"m": self.m, "v": self.v}

    def hyperparameters(self):
        return {"t": self.t, "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps}

    def step(self, params, grads):
        adam_step(params, grads, self)


@dataclass
class MomentumState(OptimizerState):
    kind: ClassVar[str] = "momentum"
    steps: int = 1
    mu: float = MOMENTUM_MU
    lr_start: float = MOMENTUM_LR_START
    lr_end: float = MOMENTUM_LR_END
    lr: float = MOMENTUM_LR_START
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr_end > self.lr_start:
            raise ValueError(f"lr_end ({self.lr_end}) must not exceed lr_start ({self.lr_start})")

    def slots(self):
        return {"velocity": self.velocity}

    def hyperparameters(self):
        return {"t": self.t, "steps": self.steps, "mu": self.mu, "lr_start": self.lr_start,
                "lr_end": self.lr_end, "lr": self.lr}

    def step(self, params, grads):
        momentum_step(params, grads, self, self.t)


def adam_step(params: Sequence[Parameter], grads: Grads, state: AdamState) -> None:
    """
    One bias-corrected Adam update.

    Args:
        params: Trainable parameters to update in place
        grads: Gradient per parameter name
        state: Moment estimates and step counter, updated in place
    """
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for param in params:
        grad = _checked_grad(param, grads, state.t - 1)
        values = param.tensor.values
        m = state.m.setdefault(param.name, np.zeros_like(values))
        v = state.v.setdefault(param.name, np.zeros_like(values))
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        values -= update.astype(values.dtype, copy=False)


def momentum_lr(t: int, steps: int, start: float = MOMENTUM_LR_START, end: float = MOMENTUM_LR_END) -> float:
    """Linear decay from start at t=0 to end at t=steps-1."""
    if steps <= 1:
        return start
    return start + (end - start) * t / (steps - 1)


def momentum_step(params: Sequence[Parameter], grads: Grads, state: MomentumState, t: int) -> None:
    """Heavy-ball update v <- mu*v + g, theta <- theta - lr(t)*v."""
    if state.steps > 0 and t >= state.steps:
        raise TrainingError(f"Update index {t} beyond the {state.steps}-step schedule", step=t)
    lr = momentum_lr(t, state.steps, state.lr_start, state.lr_end)
    for param in params:
        grad = _checked_grad(param, grads, t)
        values = param.tensor.values
        velocity = state.velocity.setdefault(param.name, np.zeros_like(values))
        velocity *= state.mu
        velocity += grad
        values -= (lr * velocity).astype(values.dtype, copy=False)
    state.lr = lr
    state.t = t + 1


def make_optimizer(kind: str, steps: int) -> OptimizerState:
    if kind == AdamState.kind:
        return AdamState()
    if kind == MomentumState.kind:
        return MomentumState(steps=steps)
    raise ValueError(f"Unknown optimizer '{kind}'")


def optimizer_from_dict(kind: str, hyperparameters: dict, slots: Dict[str, Dict[str, np.ndarray]]) -> OptimizerState:
    """Rebuild an optimizer state from its checkpointed form."""
    if kind == AdamState.kind:
        return AdamState(m=dict(slots.get("m", {})), v=dict(slots.get("v", {})), **hyperparameters)
    if kind == MomentumState.kind:
        return MomentumState(velocity=dict(slots.get("velocity", {})), **hyperparameters)
    raise ValueError(f"Unknown optimizer '{kind}'")
