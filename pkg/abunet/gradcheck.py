"""
Finite-difference verification of every analytic gradient in the package.

Each check compares backward() against central differences of a scalar
objective in float64. An element passes when its absolute error is at
most 1e-7 or its relative error at most 1e-4. An element that fails is
re-estimated with a quarter of the step; if the two numeric estimates
disagree the perturbation crossed a kink (ReLU at zero, a max-pool switch)
and the element is counted as skipped rather than failed.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .activations import AbuUnit, Activation, FixedActivation, ScaledActivation, make_activation
from .autodiff import Tape, Tensor, backward
from .constants import ALL_ACTIVATIONS
from .network import BatchNormOp, build_smcn, forward_net
from .utils import relative_error

logger = logging.getLogger(__name__)

GRAD_EPS = 1e-5
GRAD_RTOL = 1e-4
GRAD_ATOL = 1e-7
ACTIVATION_TRIALS = 8
# keeps activation inputs clear of the kinks of relu/elu/selu
KINK_MARGIN = 1e-2
SCOPES = ("activations", "layers", "network", "all")
NETWORK_CASES = (("smcn", "abu"), ("smcn_s", "a_tanh"), ("smcn_bn", "abu_soft"), ("smcn10", "swish"))

Objective = Callable[[Tape], Tensor]


@dataclass
class Mismatch:
    component: str
    parameter: str
    index: Tuple[int, ...]
    analytic: float
    numeric: float
    relative: float

    def describe(self) -> str:
        return (f"{self.component}: {self.parameter}{list(self.index)} analytic={self.analytic:.10g} "
                f"numeric={self.numeric:.10g} rel={self.relative:.3e}")


@dataclass
class ComponentReport:
    """Outcome of one component's checks, accumulated over its random cases."""
    component: str
    cases: int = 0
    checked: int = 0
    skipped: int = 0
    worst_relative: float = 0.0
    mismatches: List[Mismatch] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.mismatches

    def merge(self, other: "ComponentReport") -> None:
        self.cases += other.cases
        self.checked += other.checked
        self.skipped += other.skipped
        self.worst_relative = max(self.worst_relative, other.worst_relative)
        self.mismatches.extend(other.mismatches)


class GradcheckFailure(AssertionError):
    """Raised when analytic and numeric gradients disagree."""
    def __init__(self, reports: Sequence[ComponentReport]):
        self.reports = list(reports)
        self.mismatches = [m for r in self.reports for m in r.mismatches]
        shown = "\n".join(m.describe() for m in self.mismatches[:20])
        more = len(self.mismatches) - 20
        if more > 0:
            shown += f"\n... and {more} more"
        super().__init__(f"{len(self.mismatches)} gradient mismatch(es):\n{shown}")


def _value(objective: Objective) -> float:
    return float(objective(Tape()).values)


def _central(objective: Objective, values: np.ndarray, index: Tuple[int, ...], eps: float) -> float:
    original = values[index]
    values[index] = original + eps
    plus = _value(objective)
    values[index] = original - eps
    minus = _value(objective)
    values[index] = original
    return (plus - minus) / (2.0 * eps)


def _within(analytic: float, numeric: float) -> bool:
    return abs(analytic - numeric) <= GRAD_ATOL or float(relative_error(analytic, numeric)) <= GRAD_RTOL


def check_closure(
    component: str,
    objective: Objective,
    tensors: Sequence[Tuple[str, Tensor]],
    eps: float = GRAD_EPS,
    rng: Optional[np.random.Generator] = None,
    max_elements: Optional[int] = None,
) -> ComponentReport:
    """
    Compare analytic and central-difference gradients of one objective.

    Args:
        component: Name reported for this check
        objective: Builds the scalar objective on the given tape; must be deterministic
        tensors: (name, tensor) pairs to differentiate; perturbed in place
        eps: Finite-difference step
        rng: Picks the sampled elements when max_elements is set
        max_elements: Upper bound on checked elements per tensor

    Returns:
        ComponentReport for this single case
    """
    tape = Tape()
    loss = objective(tape)
    grads = backward(tape, loss)
    report = ComponentReport(component=component, cases=1)

    for name, tensor in tensors:
        analytic = grads.get(tensor.id, np.zeros(tensor.shape))
        indices = list(np.ndindex(tensor.shape))
        if max_elements is not None and len(indices) > max_elements:
            chooser = rng if rng is not None else np.random.default_rng(0)
            picks = chooser.choice(len(indices), size=max_elements, replace=False)
            indices = [indices[i] for i in sorted(picks)]

        for index in indices:
            a = float(analytic[index])
            n = _central(objective, tensor.values, index, eps)
            report.checked += 1
            if _within(a, n):
                report.worst_relative = max(report.worst_relative, float(relative_error(a, n)))
                continue
            fine = _central(objective, tensor.values, index, eps / 4.0)
            if not _within(n, fine):
                logger.debug(f"{component}: {name}{list(index)} straddles a kink, skipped")
                report.skipped += 1
                continue
            rel = float(relative_error(a, n))
            report.worst_relative = max(report.worst_relative, rel)
            report.mismatches.append(Mismatch(component, name, tuple(index), a, n, rel))
    return report


def _randomize(act: Activation, rng: np.random.Generator) -> None:
    """Move activation parameters off their symmetric initial values."""
    if isinstance(act, AbuUnit):
        for param in act.alphas:
            param.values[()] = rng.uniform(0.1, 0.5)
        act.beta.values[()] = rng.uniform(0.5, 1.5)
        return
    if isinstance(act, ScaledActivation):
        act.alpha.values[()] = rng.uniform(0.5, 1.5)
    if isinstance(act, FixedActivation) and act.beta is not None:
        act.beta.values[()] = rng.uniform(0.5, 1.5)


def _away_from_zero(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, x + KINK_MARGIN, x - KINK_MARGIN)


def _weighted_sum(tape: Tape, out: Tensor, weights: np.ndarray) -> Tensor:
    return tape.sum(tape.mul(out, Tensor(weights)))


def activation_suite(rng: np.random.Generator, trials: int = ACTIVATION_TRIALS, shape: Tuple[int, int] = (4, 5)) -> List[ComponentReport]:
    """All fixed, scaled and ABU configs, with gradients for inputs and activation parameters."""
    reports = []
    for config in ALL_ACTIVATIONS:
        report = ComponentReport(component=f"activation:{config}")
        for _ in range(trials):
            act = make_activation(config, 1, dtype=np.float64)
            _randomize(act, rng)
            x = Tensor(_away_from_zero(rng.normal(size=shape)), requires_grad=True, name="x")
            weights = rng.normal(size=shape)

            def objective(tape, act=act, x=x, weights=weights):
                return _weighted_sum(tape, act(tape, x), weights)

            tensors = [("x", x)] + [(p.name, p.tensor) for p in act.parameters.values()]
            report.merge(check_closure(report.component, objective, tensors))
        reports.append(report)
    return reports


def _layer_cases(rng: np.random.Generator):
    """(component, objective builder) pairs; each builder returns (objective, named tensors)."""

    def leaf(name, shape, values=None):
        data = rng.normal(size=shape) if values is None else values
        return Tensor(data, requires_grad=True, name=name)

    def conv(kernel, channels, out_channels, size):
        def build():
            x, w = leaf("x", (2, size, size, channels)), leaf("kernel", (kernel, kernel, channels, out_channels))
            weights = rng.normal(size=(2, size, size, out_channels))
            return (lambda tape: _weighted_sum(tape, tape.conv2d(x, w), weights)), [("x", x), ("kernel", w)]
        return build

    def dense():
        x, w, b = leaf("x", (3, 6)), leaf("kernel", (6, 4)), leaf("bias", (4,))
        weights = rng.normal(size=(3, 4))
        return (lambda tape: _weighted_sum(tape, tape.add(tape.matmul(x, w), b), weights)), \
            [("x", x), ("kernel", w), ("bias", b)]

    def pool(kind):
        def build():
            x = leaf("x", (2, 5, 5, 2))
            weights = rng.normal(size=(2, 3, 3, 2))
            op = getattr(Tape, kind)
            return (lambda tape: _weighted_sum(tape, op(tape, x, 3, 2), weights)), [("x", x)]
        return build

    def dropout():
        x = leaf("x", (4, 6))
        mask = rng.random((4, 6)) >= 0.5
        weights = rng.normal(size=(4, 6))
        return (lambda tape: _weighted_sum(tape, tape.dropout(x, mask, 0.5), weights)), [("x", x)]

    def flatten():
        x, w = leaf("x", (2, 3, 3, 2)), leaf("kernel", (18, 3))
        weights = rng.normal(size=(2, 3))
        return (lambda tape: _weighted_sum(tape, tape.matmul(tape.flatten(x), w), weights)), \
            [("x", x), ("kernel", w)]

    def batch_norm(training):
        def build():
            x = leaf("x", (4, 3, 3, 2))
            gamma, beta = leaf("gamma", (2,), rng.uniform(0.5, 1.5, 2)), leaf("beta", (2,))
            mean, var = (None, None) if training else (rng.normal(size=2), rng.uniform(0.5, 2.0, 2))
            weights = rng.normal(size=(4, 3, 3, 2))

            def objective(tape):
                y = tape.forward(BatchNormOp(1e-5, mean, var), [x, gamma, beta])
                return _weighted_sum(tape, y, weights)
            return objective, [("x", x), ("gamma", gamma), ("beta", beta)]
        return build

    def softmax_xent():
        logits = leaf("logits", (5, 4))
        labels = rng.integers(0, 4, size=5)
        return (lambda tape: tape.softmax_xent(logits, labels)), [("logits", logits)]

    return [
        ("layer:conv2d_3x3", conv(3, 3, 4, 5)),
        ("layer:conv2d_5x5", conv(5, 2, 3, 6)),
        ("layer:dense", dense),
        ("layer:max_pool", pool("max_pool")),
        ("layer:avg_pool", pool("avg_pool")),
        ("layer:dropout", dropout),
        ("layer:flatten", flatten),
        ("layer:batch_norm_train", batch_norm(True)),
        ("layer:batch_norm_eval", batch_norm(False)),
        ("layer:softmax_xent", softmax_xent),
    ]


def layer_suite(rng: np.random.Generator, trials: int = 3) -> List[ComponentReport]:
    """Every layer type of the network on small random inputs."""
    reports = []
    for component, build in _layer_cases(rng):
        report = ComponentReport(component=component)
        for _ in range(trials):
            objective, tensors = build()
            report.merge(check_closure(component, objective, tensors))
        reports.append(report)
    return reports


def network_suite(
    rng: np.random.Generator,
    cases: Sequence[Tuple[str, str]] = NETWORK_CASES,
    max_elements: int = 30,
) -> List[ComponentReport]:
    """
    Whole tiny SMCNs (8x8 input, 4 channels, dense 8/6, 3 classes) in train mode.

    Dropout masks are drawn once and frozen so the objective is deterministic.
    """
    reports = []
    for variant, activation in cases:
        component = f"network:{variant}/{activation}"
        net = build_smcn(variant, activation, num_classes=3, seed=int(rng.integers(1 << 16)),
                         conv_channels=4, dense_units=(8, 6), image_size=8, dtype=np.float64)
        for act in net.activations.values():
            _randomize(act, rng)
        images = rng.normal(size=(3, 8, 8, 3))
        weights = rng.normal(size=(3, 3))
        masks = {}
        forward_net(net, images, mode="train", rng=rng, masks=masks)

        def objective(tape, net=net, images=images, weights=weights, masks=masks):
            return _weighted_sum(tape, forward_net(net, images, mode="train", masks=masks, tape=tape), weights)

        tensors = [(p.name, p.tensor) for p in net.trainable_parameters()]
        reports.append(check_closure(component, objective, tensors, rng=rng, max_elements=max_elements))
    return reports


def run_gradcheck(scope: str = "all", seed: int = 0) -> List[ComponentReport]:
    """
    Run the requested suites and log the worst relative error per component.

    Args:
        scope: activations | layers | network | all
        seed: Seed of every random input and parameter draw

    Returns:
        Reports of all components checked

    Raises:
        GradcheckFailure: if any element mismatches
    """
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got '{scope}'")
    rng = np.random.default_rng(seed)
    reports: List[ComponentReport] = []
    if scope in ("activations", "all"):
        reports.extend(activation_suite(rng))
    if scope in ("layers", "all"):
        reports.extend(layer_suite(rng))
    if scope in ("network", "all"):
        reports.extend(network_suite(rng))

    for report in reports:
        status = "ok" if report.passed else "FAILED"
        logger.info(f"{report.component}: {status}, {report.checked} elements over {report.cases} case(s), "
                    f"{report.skipped} skipped at kinks, worst rel {report.worst_relative:.2e}")
    failed = [r for r in reports if not r.passed]
    if failed:
        raise GradcheckFailure(failed)
    return reports
