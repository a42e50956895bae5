"""Two-phase training: data path under random gating, then the gate controller.

Phase 1 optimizes the task loss only, with a fresh gate plan per batch drawn
from the configured ``u`` distribution.  Phase 2 freezes the data path and
optimizes the controller on ``J = L + lambda * C`` with either the
score-function estimator or a binary Concrete relaxation.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import tensor as T
from .data import BatchStream, Dataset, batches
from .gating import (
    GateVector,
    PenaltySpec,
    complexity_penalty,
    network_soft_utilization,
    network_utilization,
)
from .strategies import (
    ControllerParams,
    controller_forward,
    enforce_min_active,
    sample_bernoulli,
    sample_concrete,
    score,
    split_by_module,
    static_plan,
)
from .tensor import Tensor

logger = logging.getLogger(__name__)

# named substreams derived from the global seed
STREAM_DATA, STREAM_GATES, STREAM_INIT, STREAM_CONTROLLER = 0, 1, 2, 3


class DivergenceError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "datapath"
    epochs: int = 30
    batch_size: int = 64
    optimizer: str = "sgd"
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    schedule: str = "cosine"
    eta_min: float = 0.0
    t0: float = 10.0
    t_mult: float = 2.0
    penalty_form: str = "dist"
    penalty_p: int = 2
    lam: float = 10.0
    u_dist: str = "uniform"
    u_value: float = 1.0
    anneal_t0: float = 1.0
    anneal_step: float = 0.05
    gating: str = "nested"
    per_module_k: bool = False
    per_example: bool = False
    estimator: str = "reinforce"
    temperature: float = 0.1
    alpha_start: float = 0.8
    alpha_end: float = 0.99
    alpha_epochs: int = 20
    baseline: bool = False
    baseline_decay: float = 0.9
    clip_norm: float = 0.0
    seed: int = 0

    def validate(self) -> None:
        problems = []
        if self.phase not in ("datapath", "controller"):
            problems.append(f"phase: expected 'datapath' or 'controller', got {self.phase!r}")
        if self.epochs < 1:
            problems.append("epochs: must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size: must be >= 1")
        if self.lr <= 0:
            problems.append("lr: must be > 0")
        if self.clip_norm < 0:
            problems.append("clip_norm: must be >= 0 (0 disables clipping)")
        if self.lam < 0:
            problems.append("lam: must be >= 0")
        if self.optimizer not in ("sgd", "adam"):
            problems.append(f"optimizer: expected 'sgd' or 'adam', got {self.optimizer!r}")
        if self.schedule not in ("cosine", "fixed"):
            problems.append(f"schedule: expected 'cosine' or 'fixed', got {self.schedule!r}")
        if self.schedule == "cosine" and (self.t0 <= 0 or self.t_mult < 1):
            problems.append("t0/t_mult: need t0 > 0 and t_mult >= 1")
        if self.u_dist not in ("uniform", "annealed", "fixed"):
            problems.append(f"u_dist: expected 'uniform', 'annealed' or 'fixed', got {self.u_dist!r}")
        if self.u_dist == "annealed" and (not 0 <= self.anneal_t0 <= 1 or self.anneal_step <= 0):
            problems.append("anneal_t0/anneal_step: need t0 in [0, 1] and step > 0")
        if not 0 <= self.u_value <= 1:
            problems.append("u_value: must lie in [0, 1]")
        if self.gating not in ("nested", "independent", "depthwise"):
            problems.append(f"gating: expected 'nested', 'independent' or 'depthwise', got {self.gating!r}")
        if self.estimator not in ("reinforce", "concrete"):
            problems.append(f"estimator: expected 'reinforce' or 'concrete', got {self.estimator!r}")
        if self.estimator == "concrete" and self.temperature <= 0:
            problems.append("temperature: must be > 0 for concrete training")
        try:
            PenaltySpec(self.penalty_form, self.penalty_p, self.lam)
        except ValueError as exc:
            problems.append(f"penalty: {exc}")
        if problems:
            raise ValueError("; ".join(problems))

    @property
    def penalty(self) -> PenaltySpec:
        return PenaltySpec(self.penalty_form, self.penalty_p, self.lam)

    @classmethod
    def controller_defaults(cls, **overrides) -> "TrainConfig":
        base = dict(phase="controller", epochs=20, optimizer="adam", lr=1e-3, schedule="fixed",
                    weight_decay=0.0, estimator="reinforce")
        base.update(overrides)
        return cls(**base)


@dataclass
class LossBreakdown:
    L: float
    C: float
    J: float
    utilization: float
    tensor: Tensor | None = field(default=None, repr=False, compare=False)


def combined_loss(logits: Tensor, labels, gates, u: float, spec: PenaltySpec) -> LossBreakdown:
    """Task loss (mean cross-entropy) plus ``lambda`` times the complexity penalty.

    With relaxed (tensor-valued) gates the utilization entering the penalty
    is the weighted mean gate value, so gradients reach the gates; the
    reported ``utilization`` is always the hard active fraction.
    """
    L = T.batch_mean(T.softmax_cross_entropy(logits, labels))
    hard_c = network_utilization(gates)
    if any(isinstance(g.values, Tensor) for g in gates):
        C = complexity_penalty(network_soft_utilization(gates), u, spec)
        J = T.add(L, T.scalar_mul(C, spec.lam))
        c_val = C.item()
    else:
        c_val = complexity_penalty(hard_c, u, spec)
        J = T.add(L, Tensor(np.asarray(spec.lam * c_val)))
    return LossBreakdown(L=L.item(), C=c_val, J=J.item(), utilization=hard_c, tensor=J)


def cosine_lr(progress: float, eta_max: float, eta_min: float = 0.0, t0: float = 10.0, t_mult: float = 2.0) -> float:
    """Cosine annealing with warm restarts; ``progress`` is in (fractional) epochs."""
    t_cur, t_i = float(progress), float(t0)
    while t_cur >= t_i:
        t_cur -= t_i
        t_i *= t_mult
    return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + math.cos(math.pi * t_cur / t_i))


@dataclass
class UDistribution:
    low: float
    high: float = 1.0

    def sample(self, rng: np.random.Generator) -> float:
        return self.low if self.low == self.high else float(rng.uniform(self.low, self.high))


def anneal_u_sampler(epoch: int, t0: float = 1.0, step: float = 0.05) -> UDistribution:
    """``Uniform[t, 1]`` with ``t = max(0, t0 - step * epoch)``."""
    if not 0 <= t0 <= 1 or step <= 0:
        raise ValueError("need t0 in [0, 1] and step > 0")
    return UDistribution(max(0.0, t0 - step * epoch), 1.0)


def u_distribution(cfg: TrainConfig, epoch: int) -> UDistribution:
    if cfg.u_dist == "fixed":
        return UDistribution(cfg.u_value, cfg.u_value)
    if cfg.u_dist == "annealed":
        return anneal_u_sampler(epoch, cfg.anneal_t0, cfg.anneal_step)
    return UDistribution(0.0, 1.0)


# --------------------------------------------------------------------------
# optimizers
# --------------------------------------------------------------------------


def optimizer_step(kind: str, params: dict, grads: dict, state: dict, lr: float, momentum: float = 0.9,
                   weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict, dict]:
    """One update of named numpy arrays; returns new params and state.

    ``sgd``: heavy-ball momentum with L2 weight decay folded into the gradient.
    ``adam``: bias-corrected Adam.  Missing gradients count as zero.
    """
    new_params, new_state = {}, dict(state)
    t = state.get("__t__", 0) + 1
    new_state["__t__"] = t
    for name, p in params.items():
        g = grads.get(name)
        g = np.zeros_like(p) if g is None else g
        if weight_decay:
            g = g + weight_decay * p
        if kind == "sgd":
            v = momentum * state[name] + g if name in state else g
            new_state[name] = v
            new_params[name] = p - lr * v
        elif kind == "adam":
            m, s = state.get(name, (np.zeros_like(p), np.zeros_like(p)))
            m = betas[0] * m + (1 - betas[0]) * g
            s = betas[1] * s + (1 - betas[1]) * g * g
            new_state[name] = (m, s)
            m_hat = m / (1 - betas[0] ** t)
            s_hat = s / (1 - betas[1] ** t)
            new_params[name] = p - lr * m_hat / (np.sqrt(s_hat) + eps)
        else:
            raise ValueError(f"unknown optimizer {kind!r}")
    return new_params, new_state


def clip_grad_norm(grads: dict, max_norm: float) -> dict:
    """Rescale all gradients together so their global L2 norm is at most ``max_norm``."""
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total <= max_norm or total == 0:
        return grads
    return {k: g * (max_norm / total) for k, g in grads.items()}


class Optimizer:
    """Applies :func:`optimizer_step` to tensors in place and clears their grads."""

    def __init__(self, params: dict[str, Tensor], kind: str = "sgd", momentum: float = 0.9,
                 weight_decay: float = 0.0, clip_norm: float = 0.0):
        self.params = params
        self.kind = kind
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.state: dict = {}

    def step(self, lr: float) -> None:
        values = {k: t.data for k, t in self.params.items()}
        grads = {k: t.grad for k, t in self.params.items() if t.grad is not None}
        if self.clip_norm:
            grads = clip_grad_norm(grads, self.clip_norm)
        new, self.state = optimizer_step(self.kind, values, grads, self.state, lr,
                                         momentum=self.momentum, weight_decay=self.weight_decay)
        for k, t in self.params.items():
            arr = new[k]
            arr.flags.writeable = False
            t.data = arr
            t.grad = None


def _lr(cfg: TrainConfig, progress: float) -> float:
    if cfg.schedule == "fixed":
        return cfg.lr
    return cosine_lr(progress, cfg.lr, cfg.eta_min, cfg.t0, cfg.t_mult)


# --------------------------------------------------------------------------
# phase 1
# --------------------------------------------------------------------------


@dataclass
class TrainResult:
    epochs: list[dict]
    steps: list[dict]


def _plan_key(plan) -> tuple:
    return tuple(tuple(np.flatnonzero(g.active)) for g in plan)


def _datapath_loss(net, x, y, plans):
    """Mean cross-entropy; examples sharing a plan are evaluated together."""
    if len(plans) == 1:
        return T.batch_mean(T.softmax_cross_entropy(net.forward(x, plans[0]), y)), [plans[0]]
    groups: dict[tuple, list[int]] = {}
    for i, plan in enumerate(plans):
        groups.setdefault(_plan_key(plan), []).append(i)
    sums = []
    for idx in groups.values():
        idx = np.asarray(idx)
        logits = net.forward(x[idx], plans[idx[0]])
        sums.append(T.reshape(T.total_sum(T.softmax_cross_entropy(logits, y[idx])), (1,)))
    total = T.sum_components(sums) if len(sums) > 1 else sums[0]
    return T.reshape(T.scalar_mul(total, 1.0 / len(y)), ()), plans


def _check_finite(value: float, phase: str, epoch: int, step: int) -> None:
    if not np.isfinite(value):
        raise DivergenceError(f"{phase}: non-finite loss {value} at epoch {epoch}, step {step}")


def train_datapath(net, dataset: Dataset, cfg: TrainConfig, log: Callable[[dict], None] | None = None) -> TrainResult:
    """Phase 1: fit the data path parameters under random gating."""
    cfg.validate()
    stream = BatchStream(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed * 7 + STREAM_DATA)
    gate_rng = np.random.default_rng([cfg.seed, STREAM_GATES])
    params = net.parameters()
    opt = Optimizer(params, cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    n_steps = math.ceil(len(dataset) / cfg.batch_size)
    epochs, steps = [], []
    for epoch in range(cfg.epochs):
        dist = u_distribution(cfg, epoch)
        losses, correct, utils = [], 0, []
        for step, (x, y) in enumerate(batches(stream, epoch)):
            lr = _lr(cfg, epoch + step / n_steps)
            n_plans = len(y) if cfg.per_example else 1
            plans = []
            for _ in range(n_plans):
                u = dist.sample(gate_rng)
                plans.append(static_plan(net, cfg.gating, u, gate_rng, per_module_k=cfg.per_module_k))
            loss, _ = _datapath_loss(net, x, y, plans)
            L = loss.item()
            _check_finite(L, "datapath", epoch, step)
            T.backward(loss)
            opt.step(lr)
            c = float(np.mean([network_utilization(p) for p in plans]))
            record = {"phase": "datapath", "epoch": epoch, "step": step, "L": L, "C": 0.0, "J": L,
                      "utilization": c, "lr": lr, "seed": cfg.seed}
            steps.append(record)
            if log is not None:
                log(record)
            losses.append(L * len(y))
            utils.append(c)
        summary = {"epoch": epoch, "train_loss": float(np.sum(losses) / len(dataset)),
                   "mean_utilization": float(np.mean(utils))}
        logger.info("datapath epoch %d loss %.4f", epoch, summary["train_loss"])
        epochs.append(summary)
    return TrainResult(epochs, steps)


# --------------------------------------------------------------------------
# phase 2
# --------------------------------------------------------------------------


def alpha_schedule(cfg: TrainConfig, epoch: int) -> float:
    if cfg.alpha_epochs <= 0:
        return cfg.alpha_end
    frac = min(1.0, epoch / cfg.alpha_epochs)
    return cfg.alpha_start + frac * (cfg.alpha_end - cfg.alpha_start)


def _hard_plan(net, g_flat: np.ndarray, p_flat: np.ndarray) -> list[GateVector]:
    plan = []
    for m, w, gm, pm in zip(net.modules, net.module_weights,
                            split_by_module(g_flat, net.module_sizes), split_by_module(p_flat, net.module_sizes)):
        plan.append(GateVector(enforce_min_active(gm, m.min_active, pm), w))
    return plan


def controller_step(net, psi: ControllerParams, x, y, u: float, cfg: TrainConfig, rng: np.random.Generator,
                    baseline: float | None = None) -> LossBreakdown:
    """Accumulate controller gradients for one batch; returns the loss breakdown."""
    spec = cfg.penalty
    p_t = controller_forward(psi, u)
    if cfg.estimator == "reinforce":
        p = p_t.data
        g = sample_bernoulli(p, rng)
        plan = _hard_plan(net, g, p)
        used = np.concatenate([gv.array for gv in plan])
        with T.no_grad():
            logits = net.forward(x, plan)
        bd = combined_loss(logits, y, plan, u, spec)
        weight = bd.J - (baseline if baseline is not None else 0.0)
        T.backward(T.total_sum(T.mul(p_t, Tensor(weight * score(used, p)))))
        return bd
    g_t = sample_concrete(p_t, cfg.temperature, rng)
    plan = [GateVector(piece, w) for piece, w in zip(split_by_module(g_t, net.module_sizes), net.module_weights)]
    logits = net.forward(x, plan)
    bd = combined_loss(logits, y, plan, u, spec)
    T.backward(bd.tensor)
    return bd


def train_controller(net, psi: ControllerParams, dataset: Dataset, cfg: TrainConfig,
                     log: Callable[[dict], None] | None = None) -> TrainResult:
    """Phase 2: fit the blind controller with the data path frozen."""
    cfg.validate()
    if psi.n_outputs != net.n_gates:
        raise ValueError(f"controller emits {psi.n_outputs} gates, network has {net.n_gates}")
    before = net.checksum()
    flags = {k: t.requires_grad for k, t in net.parameters().items()}
    net.set_trainable(False)
    stream = BatchStream(dataset, cfg.batch_size, shuffle=True, seed=cfg.seed * 7 + STREAM_DATA)
    rng = np.random.default_rng([cfg.seed, STREAM_CONTROLLER])
    opt = Optimizer(psi.parameters(), cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    n_steps = math.ceil(len(dataset) / cfg.batch_size)
    baseline = None
    epochs, steps = [], []
    try:
        for epoch in range(cfg.epochs):
            psi.alpha = alpha_schedule(cfg, epoch)
            Js, gaps = [], []
            for step, (x, y) in enumerate(batches(stream, epoch)):
                lr = _lr(cfg, epoch + step / n_steps)
                u = float(rng.uniform(0.0, 1.0))
                bd = controller_step(net, psi, x, y, u, cfg, rng, baseline if cfg.baseline else None)
                _check_finite(bd.J, "controller", epoch, step)
                opt.step(lr)
                if cfg.baseline:
                    baseline = bd.J if baseline is None else cfg.baseline_decay * baseline + (1 - cfg.baseline_decay) * bd.J
                record = {"phase": "controller", "epoch": epoch, "step": step, "L": bd.L, "C": bd.C, "J": bd.J,
                          "utilization": bd.utilization, "lr": lr, "seed": cfg.seed}
                steps.append(record)
                if log is not None:
                    log(record)
                Js.append(bd.J)
                gaps.append(abs(bd.utilization - u))
            summary = {"epoch": epoch, "mean_J": float(np.mean(Js)), "mean_abs_gap": float(np.mean(gaps)),
                       "alpha": psi.alpha}
            logger.info("controller epoch %d J %.4f |c-u| %.3f", epoch, summary["mean_J"], summary["mean_abs_gap"])
            epochs.append(summary)
    finally:
        for k, t in net.parameters().items():
            t.requires_grad = flags[k]
    if net.checksum() != before:
        raise RuntimeError("data path parameters changed during controller training")
    return TrainResult(epochs, steps)


def config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
