"""Gate vectors, gated modules, utilization and complexity penalties.

A gated module computes ``y = a(gbar * f(x))``: each of its ``n`` components
is scaled by the normalized gate ``gbar = g / ||g||_1`` and the results are
aggregated by concatenation or summation.  Components whose gate is exactly
zero are not evaluated at all by :func:`gated_forward`;
:func:`reference_forward` evaluates everything and masks, and serves as the
oracle for the skipping path.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .nn import Layer
from .tensor import Tensor

__all__ = [
    "GateError",
    "GateVector",
    "PenaltySpec",
    "GatedModule",
    "ParallelGatedModule",
    "normalize_gate",
    "gated_forward",
    "reference_forward",
    "utilization",
    "soft_utilization",
    "complexity_penalty",
    "network_utilization",
]


class GateError(ValueError):
    """Gate vector incompatible with a module (length, range, min-active)."""


@dataclass(frozen=True)
class GateVector:
    """Per-component activation pattern ``values`` with resource ``weights``.

    ``values`` is a numpy array for hard (or fixed relaxed) gates, or a
    :class:`Tensor` when gradients must flow into the gate values.
    """

    values: np.ndarray | Tensor
    weights: np.ndarray | None = None

    def __post_init__(self):
        vals = self.values
        if not isinstance(vals, Tensor):
            vals = np.asarray(vals, dtype=np.float64).reshape(-1)
            object.__setattr__(self, "values", vals)
        arr = self.array
        if arr.ndim != 1 or arr.size < 1:
            raise GateError(f"gate vector must be 1-D with n >= 1, got shape {arr.shape}")
        if np.any(arr < 0) or np.any(arr > 1):
            raise GateError("gate values must lie in [0, 1]")
        w = np.ones(arr.size) if self.weights is None else np.asarray(self.weights, dtype=np.float64).reshape(-1)
        if w.shape != arr.shape or np.any(w < 0) or not np.any(w > 0):
            raise GateError("weights must be non-negative, match the gate length and have a positive entry")
        object.__setattr__(self, "weights", w)

    @property
    def array(self) -> np.ndarray:
        return self.values.data if isinstance(self.values, Tensor) else self.values

    @property
    def n(self) -> int:
        return self.array.size

    @property
    def active(self) -> np.ndarray:
        return self.array != 0

    @property
    def is_binary(self) -> bool:
        a = self.array
        return bool(np.all((a == 0) | (a == 1)))

    @classmethod
    def ones(cls, n: int, weights=None) -> "GateVector":
        return cls(np.ones(n), weights)


@dataclass(frozen=True)
class PenaltySpec:
    form: str = "dist"
    p: int = 2
    lam: float = 10.0

    def __post_init__(self):
        if self.form not in ("hinge", "dist"):
            raise ValueError(f"penalty form must be 'hinge' or 'dist', got {self.form!r}")
        if self.p not in (1, 2):
            raise ValueError(f"penalty exponent must be 1 or 2, got {self.p}")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")


def normalize_gate(g) -> np.ndarray | Tensor:
    """``g / ||g||_1``; the all-zero gate normalizes to zeros."""
    if isinstance(g, GateVector):
        g = g.values
    if isinstance(g, Tensor):
        return T.normalize_gate(g)
    g = np.asarray(g, dtype=np.float64)
    s = np.abs(g).sum()
    return np.zeros_like(g) if s == 0 else g / s


def utilization(g: GateVector) -> float:
    """Weighted fraction of active components, ``sum(w * [g != 0]) / sum(w)``."""
    return float(np.dot(g.weights, g.active) / g.weights.sum())


def soft_utilization(g: GateVector) -> Tensor:
    """Weighted mean of relaxed gate values, differentiable in the gates.

    Equals :func:`utilization` for binary gates.  Used as the complexity
    measure when gates are continuous during relaxed training.
    """
    w = Tensor(g.weights[None, :] / g.weights.sum())
    vals = g.values if isinstance(g.values, Tensor) else Tensor(g.values)
    return T.reshape(T.matmul(w, T.reshape(vals, (g.n, 1))), ())


def complexity_penalty(c, u: float, spec: PenaltySpec):
    """Hinge ``max(0, c - u)^p`` or distance ``|c - u|^p``.

    ``c`` may be a float or a scalar :class:`Tensor`; the result has the same
    kind.
    """
    if isinstance(c, Tensor):
        diff = T.sub(c, Tensor(np.full(c.shape, float(u))))
        base = T.relu(diff) if spec.form == "hinge" else T.absolute(diff)
        return base if spec.p == 1 else T.mul(base, base)
    diff = float(c) - float(u)
    base = max(0.0, diff) if spec.form == "hinge" else abs(diff)
    return base ** spec.p


def network_utilization(gates: Sequence[GateVector]) -> float:
    """Utilization over the concatenation of all modules' gate vectors."""
    if not gates:
        raise GateError("network_utilization needs at least one gate vector")
    num = sum(float(np.dot(g.weights, g.active)) for g in gates)
    den = sum(float(g.weights.sum()) for g in gates)
    return num / den


def network_soft_utilization(gates: Sequence[GateVector]) -> Tensor:
    total_w = sum(float(g.weights.sum()) for g in gates)
    parts = []
    for g in gates:
        frac = float(g.weights.sum()) / total_w
        parts.append(T.scalar_mul(soft_utilization(g), frac))
    return T.reshape(T.sum_components([T.reshape(p, (1,)) for p in parts]), ())


class GatedModule:
    """Base class for modules whose components are switched by a gate vector.

    Subclasses implement :meth:`forward`; ``skip=True`` must leave gated-off
    components unevaluated, ``skip=False`` evaluates all of them and masks.
    """

    axis = "width"
    aggregation = "sum"
    normalize = True

    def __init__(self, n_components: int, min_active: int = 0):
        if n_components < 1:
            raise ValueError("a gated module needs at least one component")
        if not 0 <= min_active <= n_components:
            raise ValueError(f"min_active must be in [0, {n_components}], got {min_active}")
        self.n_components = n_components
        self.min_active = min_active

    def check_gate(self, gate: GateVector) -> None:
        if gate.n != self.n_components:
            raise GateError(f"gate has {gate.n} entries, module has {self.n_components} components")
        if int(gate.active.sum()) < self.min_active:
            raise GateError(f"gate activates {int(gate.active.sum())} components, module needs at least {self.min_active}")

    def scales(self, gate: GateVector):
        """Per-component multipliers: ``gbar_i`` (or ``g_i`` when not normalizing)."""
        vals = gate.values
        if isinstance(vals, Tensor):
            src = T.normalize_gate(vals) if self.normalize else vals
            return [T.narrow(src, i, i + 1) for i in range(gate.n)]
        src = normalize_gate(vals) if self.normalize else vals
        return [float(s) for s in src]

    def forward(self, x: Tensor, gate: GateVector, *, skip: bool = True, counter: Counter | None = None) -> Tensor:
        raise NotImplementedError

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        raise NotImplementedError

    def component_flops(self, in_shape: tuple[int, ...]) -> list[int]:
        """Per-example FLOPs charged to each component when it is active."""
        raise NotImplementedError

    def glue_flops(self, in_shape: tuple[int, ...]) -> int:
        """Per-example FLOPs spent regardless of the gate pattern."""
        return 0


class ParallelGatedModule(GatedModule):
    """Components applied side by side to the same input (concat or sum)."""

    def __init__(self, components: Sequence[Layer], aggregation: str = "sum", min_active: int = 0):
        if aggregation not in ("concat", "sum"):
            raise ValueError(f"aggregation must be 'concat' or 'sum', got {aggregation!r}")
        super().__init__(len(components), min_active)
        self.components = list(components)
        self.aggregation = aggregation

    def _component_shapes(self, in_shape):
        shapes = [f.out_shape(in_shape) for f in self.components]
        ref = shapes[0]
        for s in shapes[1:]:
            if self.aggregation == "sum" and s != ref:
                raise T.ShapeError(f"sum aggregation needs identical component shapes, got {ref} and {s}")
            if self.aggregation == "concat" and s[1:] != ref[1:]:
                raise T.ShapeError(f"concat aggregation needs shapes equal off the concat axis, got {ref} and {s}")
        return shapes

    def out_shape(self, in_shape):
        shapes = self._component_shapes(in_shape)
        if self.aggregation == "sum":
            return shapes[0]
        return (sum(s[0] for s in shapes),) + shapes[0][1:]

    def forward(self, x, gate, *, skip=True, counter=None):
        self.check_gate(gate)
        active = gate.active
        scales = self.scales(gate)
        batch = x.shape[0]
        outs = []
        for i, f in enumerate(self.components):
            if skip and not active[i]:
                if self.aggregation == "concat":
                    outs.append(Tensor(np.zeros((batch,) + f.out_shape(x.shape[1:]))))
                continue
            y = T.scalar_mul(f(x), scales[i])
            if counter is not None:
                counter[i] += batch
            outs.append(y)
        if self.aggregation == "concat":
            return T.concat(outs, axis=1)
        if not outs:
            return Tensor(np.zeros((batch,) + self.out_shape(x.shape[1:])))
        return T.sum_components(outs)

    def parameters(self, prefix=""):
        out = {}
        for i, f in enumerate(self.components):
            out.update(f.parameters(f"{prefix}c{i}."))
        return out

    def component_flops(self, in_shape):
        shapes = self._component_shapes(in_shape)
        per_out = 2 if self.aggregation == "sum" else 1  # scale (+ accumulate)
        return [f.flops(in_shape) + per_out * int(np.prod(s)) for f, s in zip(self.components, shapes)]


def gated_forward(module: GatedModule, x: Tensor, g: GateVector, counter: Counter | None = None) -> Tensor:
    """Evaluate ``module`` skipping every component whose gate is zero."""
    return module.forward(x, g, skip=True, counter=counter)


def reference_forward(module: GatedModule, x: Tensor, g: GateVector, counter: Counter | None = None) -> Tensor:
    """Dense masked evaluation: every component runs and is scaled by its gate."""
    return module.forward(x, g, skip=False, counter=counter)
