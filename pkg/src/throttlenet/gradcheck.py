"""Finite-difference suite over every op kind and the gate controller."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .strategies import ControllerParams, controller_forward, sample_concrete

TOLERANCE = 1e-4


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float

    @property
    def ok(self) -> bool:
        return bool(np.isfinite(self.error)) and self.error < TOLERANCE


def _cases(rng: np.random.Generator) -> dict[str, tuple[Callable, list, tuple | None]]:
    """``name -> (fn, inputs, wrt)``.  Ops are looked up at call time."""
    r = rng.standard_normal
    labels = np.array([0, 2, 1])
    pos = rng.uniform(0.5, 2.0, (3, 4))
    gate = rng.uniform(0.2, 1.0, 5)
    return {
        "matmul": (lambda a, b: T.matmul(a, b), [r((3, 4)), r((4, 2))], None),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1), [r((2, 2, 5, 5)), r((3, 2, 3, 3)), r(3)], None),
        "bias-add": (lambda x, b: T.bias_add(x, b), [r((2, 3, 2, 2)), r(3)], None),
        "add": (lambda a, b: T.add(a, b), [r((3, 4)), r((3, 4))], None),
        "sub": (lambda a, b: T.sub(a, b), [r((3, 4)), r((3, 4))], None),
        "scalar-mul": (lambda x, s: T.scalar_mul(x, s), [r((3, 4)), r(1)], None),
        "elementwise-mul": (lambda a, b: T.mul(a, b), [r((3, 4)), r((3, 4))], None),
        "relu": (lambda x: T.relu(x), [r((4, 5))], None),
        "sigmoid": (lambda x: T.sigmoid(x), [r((4, 5))], None),
        "log": (lambda x: T.log(x), [pos], None),
        "abs": (lambda x: T.absolute(x), [r((4, 5))], None),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [r((2, 3, 2)), r((2, 1, 2))], None),
        "narrow": (lambda x: T.narrow(x, 1, 4), [r((3, 5))], None),
        "reshape": (lambda x: T.reshape(x, (6, 2)), [r((3, 4))], None),
        "sum-over-components": (lambda a, b, c: T.sum_components([a, b, c]), [r((2, 3)), r((2, 3)), r((2, 3))], None),
        "total-sum": (lambda x: T.total_sum(x), [r((3, 4))], None),
        "global-mean-pool": (lambda x: T.global_mean_pool(x), [r((2, 3, 4, 4))], None),
        "max-pool2d": (lambda x: T.max_pool2d(x, 2), [r((2, 2, 4, 4))], None),
        "flatten": (lambda x: T.flatten(x), [r((2, 3, 2, 2))], None),
        "softmax-cross-entropy": (lambda z: T.softmax_cross_entropy(z, labels), [r((3, 4))], None),
        "batch-mean": (lambda x: T.batch_mean(x), [r(6)], None),
        "normalize-gate": (lambda g: T.normalize_gate(g), [gate], None),
    }


def _controller_case(rng: np.random.Generator):
    psi = ControllerParams.init(5, hidden=8, rng=rng, alpha=0.9)
    names = ("w1", "b1", "w2", "b2")
    start = [psi.parameters()[k].data for k in names]

    def fn(w1, b1, w2, b2):
        return controller_forward(ControllerParams(w1, b1, w2, b2, alpha=0.9), np.array([0.3, 0.7]))

    return fn, start


def _concrete_case(rng: np.random.Generator):
    """Relaxed gate sample at t = 0.5 as a function of controller pre-activations."""
    noise = rng.logistic(0.0, 1.0, 6)

    def fn(z):
        return sample_concrete(T.sigmoid(z), 0.5, noise=noise)

    return fn, [rng.standard_normal(6)]


def run_gradcheck(seed: int = 0, step: float = 1e-5) -> list[CheckResult]:
    """One result per op kind, then the controller and the relaxed-gate path."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, inputs, wrt) in _cases(rng).items():
        err = T.finite_diff_check(fn, inputs, step=step, rng=np.random.default_rng([seed, len(results)]), wrt=wrt)
        results.append(CheckResult(name, err))
    fn, start = _controller_case(rng)
    results.append(CheckResult("controller", T.finite_diff_check(fn, start, step=step, rng=np.random.default_rng([seed, 99]))))
    fn, start = _concrete_case(rng)
    results.append(CheckResult("concrete-gate", T.finite_diff_check(fn, start, step=step, rng=np.random.default_rng([seed, 98]))))
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'op'.ljust(width)}  max_rel_error  status"]
    for r in results:
        lines.append(f"{r.name.ljust(width)}  {r.error:13.3e}  {'ok' if r.ok else 'FAIL'}")
    return "\n".join(lines)
