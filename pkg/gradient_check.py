#!/usr/bin/env python3
"""
🔬 GRADIENT CHECK
Central finite differences against reverse-mode gradients, in 64-bit.

Every case builds an op output y from random inputs and scores the scalar
L = Σ y·R for a fixed random R, so each output element contributes with its own
weight. Up to `max_coords` coordinates per input tensor are perturbed by ±h and
compared with the tape's gradient by

    ‖analytic − numeric‖∞ / max(‖analytic‖∞, ‖numeric‖∞, 1e-8)
"""

from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from palsy_losses import ClassCenters, center_loss, joint_loss, softmax_cross_entropy
from resnet3d_model import NetworkSpec, forward, init_params
from tensor_core import (
    Mode, Tensor, backward, batchnorm3d, conv3d, global_avg_pool, linear, max_pool3d, mul, precision, relu, sum_all,
)

STEP = 1e-4
TOLERANCE = 1e-4
MAX_COORDS = 128

Build = Callable[[Dict[str, Tensor]], Tensor]
Case = Tuple[Dict[str, np.ndarray], Build, Sequence[str]]


@dataclass(frozen=True)
class GradCheckResult:
    op: str
    instance: int
    tensor: str
    rel_error: float


@dataclass(frozen=True)
class GradCheckSummary:
    results: Tuple[GradCheckResult, ...]
    tolerance: float = TOLERANCE

    @property
    def worst(self) -> Optional[GradCheckResult]:
        return max(self.results, key=lambda r: r.rel_error) if self.results else None

    @property
    def failures(self) -> List[GradCheckResult]:
        return [r for r in self.results if not r.rel_error < self.tolerance]

    @property
    def passed(self) -> bool:
        return not self.failures

    def ops(self) -> List[str]:
        return sorted({r.op for r in self.results})


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    diff = np.max(np.abs(analytic - numeric)) if analytic.size else 0.0
    scale = max(np.max(np.abs(analytic)) if analytic.size else 0.0,
                np.max(np.abs(numeric)) if numeric.size else 0.0, 1e-8)
    return float(diff / scale)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    return sum_all(mul(out, Tensor(weights)))


def check_case(op: str, instance: int, case: Case, rng: np.random.Generator, corrupt: bool = False,
               step: float = STEP, max_coords: int = MAX_COORDS) -> List[GradCheckResult]:
    inputs, build, wrt = case
    tensors = {name: Tensor(value, requires_grad=name in wrt) for name, value in inputs.items()}
    out = build(tensors)
    weights = rng.standard_normal(out.shape)
    record = backward(_weighted_sum(out, weights))

    def score(values: Dict[str, np.ndarray]) -> float:
        return float(np.sum(build({k: Tensor(v) for k, v in values.items()}).data * weights))

    results = []
    for name in wrt:
        analytic = record[tensors[name]].copy()
        if corrupt:
            analytic = analytic * 1.01
        size = inputs[name].size
        coords = rng.choice(size, size=min(size, max_coords), replace=False)
        numeric = np.empty(coords.shape[0])
        for k, c in enumerate(coords):
            shifted = dict(inputs)
            plus, minus = inputs[name].copy(), inputs[name].copy()
            plus.flat[c] += step
            minus.flat[c] -= step
            shifted[name] = plus
            up = score(shifted)
            shifted[name] = minus
            numeric[k] = (up - score(shifted)) / (2.0 * step)
        results.append(GradCheckResult(op, instance, name, relative_error(analytic.reshape(-1)[coords], numeric)))
    return results


# ---------------------------------------------------------------------------
# Cases
# ---------------------------------------------------------------------------

def _conv_case(rng: np.random.Generator) -> Case:
    stride = tuple(int(s) for s in rng.integers(1, 3, size=3))
    padding = tuple(int(p) for p in rng.integers(0, 2, size=3))
    inputs = {"x": rng.standard_normal((2, 2, 4, 4, 4)), "kernel": rng.standard_normal((3, 2, 3, 3, 3)),
              "bias": rng.standard_normal(3)}
    return inputs, lambda t: conv3d(t["x"], t["kernel"], t["bias"], stride=stride, padding=padding), ("x", "kernel", "bias")


def _bn_train_case(rng: np.random.Generator) -> Case:
    inputs = {"x": rng.standard_normal((2, 3, 2, 3, 3)) * 2.0 + 0.5, "scale": rng.standard_normal(3),
              "shift": rng.standard_normal(3)}
    return inputs, lambda t: batchnorm3d(t["x"], t["scale"], t["shift"], mode=Mode.TRAIN), ("x", "scale", "shift")


def _bn_eval_case(rng: np.random.Generator) -> Case:
    mean = Tensor(rng.standard_normal(3))
    var = Tensor(rng.uniform(0.5, 2.0, size=3))
    inputs = {"x": rng.standard_normal((2, 3, 2, 3, 3)), "scale": rng.standard_normal(3),
              "shift": rng.standard_normal(3)}
    return inputs, lambda t: batchnorm3d(t["x"], t["scale"], t["shift"], mode=Mode.EVAL, running_mean=mean,
                                         running_var=var), ("x", "scale", "shift")


def _max_pool_case(rng: np.random.Generator) -> Case:
    # distinct values 0.01 apart keep every window's winner stable under ±h
    shape = (2, 2, 4, 4, 4)
    x = (rng.permutation(int(np.prod(shape))) * 0.01 - 1.0).reshape(shape)
    return {"x": x}, lambda t: max_pool3d(t["x"], kernel=3, stride=2, padding=1), ("x",)


def _avg_pool_case(rng: np.random.Generator) -> Case:
    return {"x": rng.standard_normal((2, 3, 2, 3, 4))}, lambda t: global_avg_pool(t["x"]), ("x",)


def _linear_case(rng: np.random.Generator) -> Case:
    inputs = {"x": rng.standard_normal((4, 5)), "weights": rng.standard_normal((5, 3)), "bias": rng.standard_normal(3)}
    return inputs, lambda t: linear(t["x"], t["weights"], t["bias"]), ("x", "weights", "bias")


def _away_from_kink(rng: np.random.Generator, draw: Callable[[], Dict[str, np.ndarray]],
                    preactivation: Callable[[Dict[str, np.ndarray]], np.ndarray], margin: float) -> Dict[str, np.ndarray]:
    for _ in range(1000):
        inputs = draw()
        if np.min(np.abs(preactivation(inputs))) > margin:
            return inputs
    raise RuntimeError("could not sample relu inputs away from the kink")


def _relu_linear_case(rng: np.random.Generator) -> Case:
    def draw():
        return {"x": rng.standard_normal((4, 5)), "weights": rng.standard_normal((5, 3)), "bias": rng.standard_normal(3)}

    inputs = _away_from_kink(rng, draw, lambda v: v["x"] @ v["weights"] + v["bias"], 0.05)
    return inputs, lambda t: relu(linear(t["x"], t["weights"], t["bias"])), ("x", "weights", "bias")


def _relu_conv_case(rng: np.random.Generator) -> Case:
    def draw():
        return {"x": rng.standard_normal((1, 2, 3, 3, 3)), "kernel": rng.standard_normal((2, 2, 2, 2, 2)),
                "bias": rng.standard_normal(2)}

    def pre(v):
        return conv3d(Tensor(v["x"]), Tensor(v["kernel"]), Tensor(v["bias"])).data

    inputs = _away_from_kink(rng, draw, pre, 0.02)
    return inputs, lambda t: relu(conv3d(t["x"], t["kernel"], t["bias"])), ("x", "kernel", "bias")


def _conv_relu_pool_linear_case(rng: np.random.Generator) -> Case:
    def draw():
        return {"x": rng.standard_normal((2, 2, 2, 3, 3)), "kernel": rng.standard_normal((3, 2, 3, 3, 3)) * 0.5,
                "conv_bias": rng.standard_normal(3), "weights": rng.standard_normal((3, 4)),
                "bias": rng.standard_normal(4)}

    def pre(v):
        return conv3d(Tensor(v["x"]), Tensor(v["kernel"]), Tensor(v["conv_bias"]), padding=1).data

    def build(t):
        hidden = relu(conv3d(t["x"], t["kernel"], t["conv_bias"], padding=1))
        return linear(global_avg_pool(hidden), t["weights"], t["bias"])

    inputs = _away_from_kink(rng, draw, pre, 0.01)
    return inputs, build, ("x", "kernel", "conv_bias", "weights", "bias")


def _softmax_case(rng: np.random.Generator) -> Case:
    labels = rng.integers(0, 3, size=4)
    inputs = {"logits": rng.standard_normal((4, 3)) * 2.0}
    return inputs, lambda t: softmax_cross_entropy(t["logits"], labels), ("logits",)


def _center_case(rng: np.random.Generator) -> Case:
    labels = rng.integers(0, 3, size=5)
    centers = ClassCenters(rng.standard_normal((3, 4)))
    return {"x": rng.standard_normal((5, 4))}, lambda t: center_loss(t["x"], labels, centers), ("x",)


def _joint_case(rng: np.random.Generator) -> Case:
    labels = rng.integers(0, 3, size=4)
    centers = ClassCenters(rng.standard_normal((3, 5)))
    inputs = {"x": rng.standard_normal((4, 5)), "weights": rng.standard_normal((5, 3)), "bias": rng.standard_normal(3)}

    def build(t):
        logits = linear(t["x"], t["weights"], t["bias"])
        return joint_loss(softmax_cross_entropy(logits, labels), center_loss(t["x"], labels, centers), 0.001)

    return inputs, build, ("x", "weights", "bias")


CASES: Dict[str, Callable[[np.random.Generator], Case]] = {
    "conv3d": _conv_case,
    "batchnorm3d_train": _bn_train_case,
    "batchnorm3d_eval": _bn_eval_case,
    "max_pool3d": _max_pool_case,
    "global_avg_pool": _avg_pool_case,
    "linear": _linear_case,
    "relu_linear": _relu_linear_case,
    "relu_conv3d": _relu_conv_case,
    "conv3d_relu_pool_linear": _conv_relu_pool_linear_case,
    "softmax_cross_entropy": _softmax_case,
    "center_loss": _center_case,
    "joint_loss": _joint_case,
}


def _network_case(selector: str, rng: np.random.Generator) -> Case:
    """Head gradients of a small-input network built from a named spec."""
    spec = NetworkSpec.from_selector(selector, num_classes=3, frames=2, spatial=16)
    params = init_params(spec, seed=int(rng.integers(0, 2 ** 31)), dtype=np.float64)
    clip = Tensor(rng.uniform(0.0, 1.0, size=(2, spec.in_channels, spec.frames, spec.spatial, spec.spatial)))
    embedding, _ = forward(clip, spec, params, Mode.EVAL)
    labels = rng.integers(0, 3, size=2)
    features = embedding.data
    inputs = {"fc.weight": params["fc.weight"].data.copy(), "fc.bias": params["fc.bias"].data.copy()}
    return inputs, lambda t: softmax_cross_entropy(linear(Tensor(features), t["fc.weight"], t["fc.bias"]), labels), \
        ("fc.weight", "fc.bias")


def run_gradcheck_suite(seed: int = 0, instances: int = 20, selector: Optional[str] = None,
                        corrupt: Optional[str] = None, ops: Optional[Sequence[str]] = None,
                        tolerance: float = TOLERANCE, max_coords: int = MAX_COORDS) -> GradCheckSummary:
    """Check every op on `instances` random inputs; optionally one network head too.

    `corrupt` names an op whose analytic gradients are scaled by 1.01 before the
    comparison, so the harness can be shown to fail.
    """
    chosen = list(ops) if ops is not None else list(CASES)
    unknown = [op for op in chosen if op not in CASES]
    if unknown:
        raise ValueError(f"unknown gradient-check op(s): {', '.join(unknown)}")
    if selector is not None:
        NetworkSpec.from_selector(selector, num_classes=3)

    rng = np.random.default_rng(seed)
    results: List[GradCheckResult] = []
    with precision("f64"):
        for op in chosen:
            for instance in range(instances):
                results.extend(check_case(op, instance, CASES[op](rng), rng, corrupt == op, max_coords=max_coords))
        if selector is not None:
            op = f"network[{selector}]"
            results.extend(check_case(op, 0, _network_case(selector, rng), rng, corrupt == op, max_coords=max_coords))
    return GradCheckSummary(tuple(results), tolerance)
