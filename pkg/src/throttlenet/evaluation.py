"""u-sweeps, utilization and FLOP accounting, area under the accuracy curve."""
from __future__ import annotations

import csv
import io
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Dataset
from .gating import GateVector, network_utilization, utilization
from .strategies import STATIC_STRATEGIES, ControllerParams, learned_plan, static_plan

STRATEGIES = STATIC_STRATEGIES + ("learned",)
DEFAULT_GRID = tuple(k / 16 for k in range(17))
CURVE_HEADER = ("strategy", "u_target", "utilization", "accuracy", "flops")
PROFILE_HEADER = ("u_target", "module_id", "mean_activation")


@dataclass(frozen=True)
class CurveRecord:
    strategy: str
    u_target: float
    utilization: float
    accuracy: float
    flops: float
    # distinct gate plans used, with the number of examples each served
    plans: tuple = field(default=(), compare=False, repr=False)

    def __post_init__(self):
        if not 0 <= self.utilization <= 1 or not 0 <= self.accuracy <= 1:
            raise ValueError(f"utilization and accuracy must lie in [0, 1]: {self}")
        if self.flops <= 0:
            raise ValueError("mean FLOPs per example must be positive")


@dataclass
class SweepSpec:
    grid: tuple[float, ...] = DEFAULT_GRID
    strategy: str = "nested"
    split: str = "test"
    batch_size: int = 256
    seed: int = 0

    def __post_init__(self):
        self.grid = tuple(float(u) for u in self.grid)
        if not self.grid:
            raise ValueError("sweep grid is empty")
        if any(not 0 <= u <= 1 for u in self.grid):
            raise ValueError("sweep grid values must lie in [0, 1]")
        if list(self.grid) != sorted(self.grid):
            raise ValueError("sweep grid must be sorted ascending")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def _plan_key(plan) -> tuple:
    return tuple(g.array.tobytes() for g in plan)


def _example_plans(net, strategy: str, u: float, count: int, controller, rng) -> list[tuple[list[GateVector], np.ndarray]]:
    """Group example indices by the gate plan that serves them."""
    if strategy == "learned":
        if controller is None:
            raise ValueError("the learned strategy needs a trained controller")
        return [(learned_plan(net, controller, u), np.arange(count))]
    if strategy != "independent":
        return [(static_plan(net, strategy, u), np.arange(count))]
    groups: dict[tuple, tuple[list, list[int]]] = {}
    for i in range(count):
        plan = static_plan(net, strategy, u, rng)
        groups.setdefault(_plan_key(plan), (plan, []))[1].append(i)
    return [(plan, np.asarray(idx)) for plan, idx in groups.values()]


def predict_logits(net, images: np.ndarray, plan, batch_size: int = 256) -> np.ndarray:
    out = []
    with T.no_grad():
        for s in range(0, len(images), batch_size):
            out.append(net.forward(np.asarray(images[s:s + batch_size], dtype=np.float64), plan).data)
    return np.concatenate(out)


def evaluate_at(net, strategy: str, u: float, testset: Dataset, *, controller: ControllerParams | None = None,
                batch_size: int = 256, rng: np.random.Generator | None = None) -> CurveRecord:
    """Top-1 accuracy, mean utilization and mean FLOPs at control value ``u``.

    Independent gating draws a fresh random plan per example from ``rng``;
    every other strategy is deterministic and serves the whole split with a
    single plan.
    """
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    if not 0 <= u <= 1:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if strategy == "independent" and rng is None:
        rng = np.random.default_rng(0)
    n = len(testset)
    groups = _example_plans(net, strategy, u, n, controller, rng)
    correct = 0
    util_sum = 0.0
    flop_sum = 0
    for plan, idx in groups:
        logits = predict_logits(net, testset.images[idx], plan, batch_size)
        correct += int(np.sum(logits.argmax(axis=1) == testset.labels[idx]))
        util_sum += network_utilization(plan) * len(idx)
        flop_sum += net.flop_count(plan) * len(idx)
    plans = tuple((plan, len(idx)) for plan, idx in groups)
    util = network_utilization(groups[0][0]) if len(groups) == 1 else util_sum / n
    return CurveRecord(strategy, float(u), float(util), correct / n, flop_sum / n, plans)


def _thread_cap() -> int:
    raw = os.environ.get("THROTTLENET_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"THROTTLENET_THREADS must be an integer, got {raw!r}") from None


def sweep(net, spec: SweepSpec, testset: Dataset, controller: ControllerParams | None = None,
          threads: int | None = None) -> list[CurveRecord]:
    """One :class:`CurveRecord` per grid point, in grid order.

    Grid points may be evaluated concurrently (``threads``, capped by
    ``THROTTLENET_THREADS``); each point draws from its own seeded stream so
    the result does not depend on scheduling.
    """
    if spec.strategy == "learned" and controller is None:
        raise ValueError("the learned strategy needs a trained controller")

    def point(i: int) -> CurveRecord:
        rng = np.random.default_rng([spec.seed, i])
        return evaluate_at(net, spec.strategy, spec.grid[i], testset, controller=controller,
                           batch_size=spec.batch_size, rng=rng)

    workers = min(threads or 1, _thread_cap(), len(spec.grid))
    if workers <= 1:
        return [point(i) for i in range(len(spec.grid))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(point, range(len(spec.grid))))


def auc(records: Sequence[CurveRecord]) -> float:
    """Trapezoidal area under accuracy vs actual utilization, divided by the utilization span.

    A curve whose points all share one utilization has zero span; its mean
    accuracy is returned.
    """
    if len(records) < 2:
        raise ValueError("auc needs at least 2 records")
    pts = sorted(((r.utilization, r.accuracy) for r in records))
    x = np.array([p[0] for p in pts])
    y = np.array([p[1] for p in pts])
    span = x[-1] - x[0]
    if span == 0:
        return float(y.mean())
    return float(np.sum(np.diff(x) * (y[1:] + y[:-1]) / 2.0) / span)


def peak_accuracy(records: Sequence[CurveRecord]) -> float:
    return max(r.accuracy for r in records)


def flop_count(net, plan) -> int:
    """Analytic per-example FLOPs of ``plan`` (a multiply-accumulate counts 2)."""
    return net.flop_count(plan)


def measured_flops(net, plan, x) -> int:
    """Per-example FLOPs tallied by actually running the gated forward pass."""
    x = np.asarray(x, dtype=np.float64)
    with T.no_grad(), T.count_flops() as tally:
        net.forward(x, plan)
    total = tally.total
    if total % len(x):
        raise ArithmeticError(f"tallied {total} FLOPs is not a multiple of the batch size {len(x)}")
    return total // len(x)


def utilization_profile(net, grid: Sequence[float] = DEFAULT_GRID, controller: ControllerParams | None = None,
                        strategy: str = "learned") -> list[tuple[float, int, float]]:
    """Rows ``(u, module_id, mean_activation)`` for every grid value and gated module.

    Test-time plans of the supported strategies do not depend on the input,
    so each module's mean activation over a test set is the weighted active
    fraction of its gate vector.
    """
    if strategy == "independent":
        raise ValueError("the profile needs a deterministic strategy")
    rows = []
    for u in grid:
        if strategy == "learned":
            if controller is None:
                raise ValueError("the learned strategy needs a trained controller")
            plan = learned_plan(net, controller, u)
        else:
            plan = static_plan(net, strategy, u)
        for j, g in enumerate(plan):
            rows.append((float(u), j, utilization(g)))
    return rows


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def curve_csv(records: Sequence[CurveRecord]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CURVE_HEADER)
    for r in records:
        w.writerow((r.strategy, _fmt(r.u_target), _fmt(r.utilization), _fmt(r.accuracy), _fmt(r.flops)))
    return buf.getvalue()


def profile_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(PROFILE_HEADER)
    for u, j, a in rows:
        w.writerow((_fmt(u), j, _fmt(a)))
    return buf.getvalue()


def write_curve_csv(path, records: Sequence[CurveRecord]) -> None:
    Path(path).write_text(curve_csv(records))


def write_profile_csv(path, rows) -> None:
    Path(path).write_text(profile_csv(rows))


def read_curve_csv(path) -> list[CurveRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != CURVE_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CURVE_HEADER)}")
        return [CurveRecord(r["strategy"], float(r["u_target"]), float(r["utilization"]),
                            float(r["accuracy"]), float(r["flops"])) for r in reader]
