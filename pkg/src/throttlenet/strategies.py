"""Gate control strategies: static rules and the learned blind controller.

Static rules turn the control signal ``u`` into a number of active
components ``k = min(n, floor(u * (n + 1)))`` per module and then choose
which ones (a prefix for nested order, a random subset for independent
order).  The learned controller is a tiny MLP ``u -> p`` whose outputs are
Bernoulli activation probabilities, trained with either the score-function
estimator or a binary Concrete relaxation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .gating import GateVector
from .tensor import Tensor

GatePlan = list  # list[GateVector], one per gated module

STATIC_STRATEGIES = ("nested", "independent", "depthwise", "all-on")


def _check_u(u: float) -> float:
    u = float(u)
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"control signal u must lie in [0, 1], got {u}")
    return u


def nested_k(n: int, u: float) -> int:
    """Number of active components for control signal ``u``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return min(n, math.floor(_check_u(u) * (n + 1)))


def nested_gate(n: int, u: float, weights=None) -> GateVector:
    k = nested_k(n, u)
    g = np.zeros(n)
    g[:k] = 1.0
    return GateVector(g, weights)


def independent_gate(n: int, u: float, rng: np.random.Generator, weights=None) -> GateVector:
    k = nested_k(n, u)
    g = np.zeros(n)
    g[rng.choice(n, size=k, replace=False)] = 1.0
    return GateVector(g, weights)


def depthwise_nested_gate(stage_sizes: Sequence[int], u: float) -> GatePlan:
    """Round-robin layer activation over stages, output stage first.

    Each pass tries to switch on one more layer in every stage.  A stage is
    passed over when its active fraction would exceed ``u``; the whole
    procedure stops as soon as the network-wide active fraction would exceed
    ``u``, or when a full pass adds nothing.  Active layers within a stage are
    always its first ones.
    """
    u = _check_u(u)
    sizes = [int(s) for s in stage_sizes]
    if not sizes or min(sizes) < 1:
        raise ValueError("stage sizes must be >= 1")
    total = sum(sizes)
    active = [0] * len(sizes)
    on = 0
    done = False
    while not done:
        added = False
        for s in reversed(range(len(sizes))):
            if active[s] == sizes[s] or (active[s] + 1) / sizes[s] > u:
                continue
            if (on + 1) / total > u:
                done = True
                break
            active[s] += 1
            on += 1
            added = True
        done = done or not added
    plan = []
    for size, k in zip(sizes, active):
        g = np.zeros(size)
        g[:k] = 1.0
        plan.append(GateVector(g))
    return plan


def enforce_min_active(g: np.ndarray, min_active: int, priority=None) -> np.ndarray:
    """Switch on the highest-priority gates until ``min_active`` are on."""
    g = np.array(g, dtype=np.float64)
    short = min_active - int(np.count_nonzero(g))
    if short <= 0:
        return g
    priority = -np.arange(g.size, dtype=np.float64) if priority is None else np.asarray(priority, dtype=np.float64)
    for i in np.argsort(-priority, kind="stable"):
        if short == 0:
            break
        if g[i] == 0:
            g[i] = 1.0
            short -= 1
    return g


def static_plan(net, strategy: str, u: float, rng: np.random.Generator | None = None,
                per_module_k: bool = False) -> GatePlan:
    """Gate plan for one control value under a static rule.

    ``per_module_k`` replaces the shared ``u`` by an independent draw
    ``k ~ DiscreteUniform[0, n]`` for every module (needs ``rng``).
    """
    u = _check_u(u)
    if strategy == "depthwise":
        plan = depthwise_nested_gate(net.module_sizes, u)
        return [GateVector(enforce_min_active(g.array, m.min_active), m_w)
                for g, m, m_w in zip(plan, net.modules, net.module_weights)]
    plan = []
    for m, w in zip(net.modules, net.module_weights):
        n = m.n_components
        if strategy == "all-on":
            k = n
        elif per_module_k:
            k = int(rng.integers(0, n + 1))
        else:
            k = nested_k(n, u)
        k = max(k, m.min_active)
        g = np.zeros(n)
        if strategy in ("nested", "all-on"):
            g[:k] = 1.0
        elif strategy == "independent":
            if rng is None:
                raise ValueError("independent gating needs an rng")
            g[rng.choice(n, size=k, replace=False)] = 1.0
        else:
            raise ValueError(f"unknown static strategy {strategy!r}")
        plan.append(GateVector(g, w))
    return plan


# --------------------------------------------------------------------------
# learned blind controller
# --------------------------------------------------------------------------


@dataclass
class ControllerParams:
    """Blind controller FC(1 -> hidden) -> ReLU -> FC(hidden -> N) -> modified sigmoid."""

    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    alpha: float = 0.8

    def __post_init__(self):
        if not 0.5 < self.alpha <= 1.0:
            raise ValueError(f"sigmoid mix alpha must lie in (0.5, 1], got {self.alpha}")

    @classmethod
    def init(cls, n_outputs: int, hidden: int = 32, rng: np.random.Generator | None = None,
             alpha: float = 0.8) -> "ControllerParams":
        rng = np.random.default_rng(0) if rng is None else rng
        return cls(
            w1=Tensor(rng.standard_normal((1, hidden)) * math.sqrt(2.0), requires_grad=True),
            b1=Tensor(rng.uniform(-1.0, 1.0, hidden), requires_grad=True),
            w2=Tensor(rng.standard_normal((hidden, n_outputs)) * math.sqrt(2.0 / hidden) * 0.1, requires_grad=True),
            b2=Tensor(np.zeros(n_outputs), requires_grad=True),
            alpha=alpha,
        )

    @property
    def n_outputs(self) -> int:
        return self.w2.shape[1]

    def parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + "w1": self.w1, prefix + "b1": self.b1, prefix + "w2": self.w2, prefix + "b2": self.b2}

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.parameters().items()}
        out["alpha"] = np.array([self.alpha])
        return out

    @classmethod
    def from_state_dict(cls, state: dict[str, np.ndarray]) -> "ControllerParams":
        missing = {"w1", "b1", "w2", "b2", "alpha"} - set(state)
        if missing:
            raise KeyError(f"controller checkpoint lacks {sorted(missing)}")
        return cls(*(Tensor(state[k], requires_grad=True) for k in ("w1", "b1", "w2", "b2")),
                   alpha=float(state["alpha"].reshape(-1)[0]))


def modified_sigmoid(z: Tensor, alpha: float) -> Tensor:
    """``alpha * sigmoid(z) + (1 - alpha) * (1 - sigmoid(z))``; range ``[1-alpha, alpha]``."""
    s = T.scalar_mul(T.sigmoid(z), 2.0 * alpha - 1.0)
    return T.add(s, Tensor(np.full(z.shape, 1.0 - alpha)))


def controller_preactivation(psi: ControllerParams, u) -> Tensor:
    u_arr = np.atleast_1d(np.asarray(u, dtype=np.float64))
    if np.any(u_arr < 0) or np.any(u_arr > 1):
        raise ValueError("control signal u must lie in [0, 1]")
    x = Tensor(u_arr.reshape(-1, 1))
    h = T.relu(T.bias_add(T.matmul(x, psi.w1), psi.b1))
    return T.bias_add(T.matmul(h, psi.w2), psi.b2)


def controller_forward(psi: ControllerParams, u) -> Tensor:
    """Activation probabilities: shape (N,) for scalar ``u``, (B, N) for a vector."""
    p = modified_sigmoid(controller_preactivation(psi, u), psi.alpha)
    return T.reshape(p, (psi.n_outputs,)) if np.ndim(u) == 0 else p


def controller_vjp(psi: ControllerParams, u: float) -> tuple[np.ndarray, Callable[[np.ndarray], dict]]:
    """Probabilities at ``u`` and a closure mapping d/dp to d/dpsi (by name)."""
    with T.no_grad():
        p = controller_forward(psi, u).data

    def vjp(upstream: np.ndarray) -> dict[str, np.ndarray]:
        params = psi.parameters()
        for t in params.values():
            t.zero_grad()
        out = controller_forward(psi, u)
        T.backward(T.total_sum(T.mul(out, Tensor(np.asarray(upstream, dtype=np.float64)))))
        grads = {k: (t.grad if t.grad is not None else np.zeros(t.shape)) for k, t in params.items()}
        for t in params.values():
            t.zero_grad()
        return grads

    return p, vjp


def sample_bernoulli(p, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    return (rng.random(p.shape) < p).astype(np.float64)


def log_prob(g, p):
    """``sum_i log(g_i p_i + (1 - g_i)(1 - p_i))`` for binary ``g``.

    With a :class:`Tensor` ``p`` the result is a differentiable scalar.
    """
    g = np.asarray(g.array if isinstance(g, GateVector) else g, dtype=np.float64)
    if isinstance(p, Tensor):
        matched = T.add(T.mul(p, Tensor(2 * g - 1)), Tensor(1 - g))  # g*p + (1-g)*(1-p)
        return T.total_sum(T.log(matched))
    p = np.asarray(p, dtype=np.float64)
    return float(np.sum(np.log(g * p + (1 - g) * (1 - p))))


def score(g, p) -> np.ndarray:
    """d log Pr(g) / dp."""
    g = np.asarray(g, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    return g / p - (1 - g) / (1 - p)


def reinforce_grad(J: float, g, p, vjp: Callable[[np.ndarray], dict]) -> dict:
    """Score-function estimate ``J * grad_psi log Pr(g)`` chained through ``vjp``."""
    return vjp(float(J) * score(g, p))


def sample_concrete(p, t: float, rng: np.random.Generator | None = None, noise=None):
    """Binary Concrete sample ``sigmoid((log(p/(1-p)) + L) / t)`` with ``L ~ Logistic(0, 1)``.

    ``t == 0`` returns the hard limit ``1(log(p/(1-p)) + L > 0)``.  A
    :class:`Tensor` ``p`` gives a reparameterized, differentiable sample.
    """
    if t < 0:
        raise ValueError(f"temperature must be >= 0, got {t}")
    shape = p.shape
    if noise is None:
        noise = (np.random.default_rng() if rng is None else rng).logistic(0.0, 1.0, size=shape)
    noise = np.asarray(noise, dtype=np.float64).reshape(shape)
    if isinstance(p, Tensor):
        if t == 0:
            return (np.log(p.data) - np.log1p(-p.data) + noise > 0).astype(np.float64)
        logit = T.sub(T.log(p), T.log(T.sub(Tensor(np.ones(shape)), p)))
        return T.sigmoid(T.scalar_mul(T.add(logit, Tensor(noise)), 1.0 / t))
    p = np.asarray(p, dtype=np.float64)
    z = np.log(p) - np.log1p(-p) + noise
    if t == 0:
        return (z > 0).astype(np.float64)
    return T._stable_sigmoid(z / t)


def test_time_gate(p) -> np.ndarray:
    """Deterministic hard gate ``1(p > 0.5)``; ties go to off."""
    p = p.data if isinstance(p, Tensor) else np.asarray(p, dtype=np.float64)
    return (p > 0.5).astype(np.float64)


def split_by_module(values, sizes: Sequence[int]) -> list:
    """Cut a flat length-N controller output into per-module pieces."""
    out, start = [], 0
    for n in sizes:
        if isinstance(values, Tensor):
            out.append(T.narrow(values, start, start + n))
        else:
            out.append(np.asarray(values)[start:start + n])
        start += n
    total = values.shape[-1]
    if start != total:
        raise ValueError(f"controller emits {total} gates, network has {start} components")
    return out


def learned_plan(net, psi: ControllerParams, u: float) -> GatePlan:
    """Deterministic test-time plan from the controller (min-active enforced)."""
    with T.no_grad():
        p = controller_forward(psi, u).data
    plan = []
    for m, w, pm in zip(net.modules, net.module_weights, split_by_module(p, net.module_sizes)):
        plan.append(GateVector(enforce_min_active(test_time_gate(pm), m.min_active, pm), w))
    return plan
