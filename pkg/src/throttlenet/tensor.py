"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation is a plain function that computes its output
with numpy and, when any input requires a gradient, records a :class:`Node`
holding the inputs and an exact backward rule.  The recorded nodes form the
computation graph; :func:`backward` walks it once in reverse topological
order.

Shapes are never broadcast implicitly.  The only operation that mixes shapes
is :func:`scalar_mul` (tensor times a one-element tensor or a Python float);
:func:`bias_add` adds a per-channel vector along axis 1 and says so in its
name.

A FLOP tally can be switched on with :func:`count_flops`; each operation adds
its analytic cost (a multiply-accumulate counts as 2).
"""
from __future__ import annotations

import contextlib
import contextvars
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "Node",
    "ShapeError",
    "GraphError",
    "OP_KINDS",
    "backward",
    "no_grad",
    "count_flops",
    "FlopTally",
    "finite_diff_check",
    "matmul",
    "conv2d",
    "bias_add",
    "add",
    "sub",
    "mul",
    "scalar_mul",
    "relu",
    "sigmoid",
    "log",
    "absolute",
    "concat",
    "narrow",
    "reshape",
    "sum_components",
    "total_sum",
    "global_mean_pool",
    "max_pool2d",
    "flatten",
    "softmax_cross_entropy",
    "batch_mean",
    "normalize_gate",
]

OP_KINDS = (
    "matmul",
    "conv2d",
    "bias-add",
    "add",
    "sub",
    "scalar-mul",
    "elementwise-mul",
    "relu",
    "sigmoid",
    "log",
    "abs",
    "concat",
    "narrow",
    "reshape",
    "sum-over-components",
    "total-sum",
    "global-mean-pool",
    "max-pool2d",
    "flatten",
    "softmax-cross-entropy",
    "batch-mean",
    "normalize-gate",
)


class ShapeError(ValueError):
    """Input shapes are not valid for an operation."""


class GraphError(RuntimeError):
    """Misuse of the computation graph (non-scalar loss, reused graph)."""


_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar("grad_enabled", default=True)
_flop_tally: contextvars.ContextVar["FlopTally | None"] = contextvars.ContextVar("flop_tally", default=None)


@dataclass
class FlopTally:
    """Accumulates analytic FLOPs of executed operations, per op kind."""

    by_kind: Counter = field(default_factory=Counter)

    @property
    def total(self) -> int:
        return int(sum(self.by_kind.values()))

    def add(self, kind: str, flops: int) -> None:
        if flops:
            self.by_kind[kind] += int(flops)


@contextlib.contextmanager
def count_flops():
    """Context manager yielding a :class:`FlopTally` for ops run inside it."""
    tally = FlopTally()
    token = _flop_tally.set(tally)
    try:
        yield tally
    finally:
        _flop_tally.reset(token)


@contextlib.contextmanager
def no_grad():
    """Run operations without recording graph nodes."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Node:
    """One recorded operation: kind, inputs and the backward rule."""

    __slots__ = ("kind", "inputs", "backward_fn", "attrs", "released")

    def __init__(self, kind: str, inputs: tuple, backward_fn: Callable, attrs: dict):
        self.kind = kind
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.attrs = attrs
        self.released = False


class Tensor:
    """A dense float64 array with an optional gradient.

    The underlying array is made read-only so values recorded in the graph
    cannot be changed behind its back.  Optimizers replace ``data`` wholesale.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: Node | None = None
        self.name = name

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        arr = np.asarray(arr, dtype=np.float64, order="C")
        arr.flags.writeable = False
        t.data = arr
        t.requires_grad = False
        t.grad = None
        t.node = None
        t.name = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor) and other.shape == self.shape:
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ShapeError(f"item() needs a one-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(kind: str, out: np.ndarray, inputs: tuple, backward_fn: Callable, flops: int = 0, **attrs) -> Tensor:
    tally = _flop_tally.get()
    if tally is not None:
        tally.add(kind, flops)
    result = Tensor._wrap(out)
    if _grad_enabled.get() and any(t.requires_grad for t in inputs):
        result.requires_grad = True
        result.node = Node(kind, inputs, backward_fn, attrs)
    return result


def _needs(inputs: Sequence[Tensor]) -> tuple[bool, ...]:
    return tuple(t.requires_grad for t in inputs)


# --------------------------------------------------------------------------
# backward
# --------------------------------------------------------------------------


def _topological(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in reversed(t.node.inputs):
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Back-propagate from a scalar ``loss``.

    Returns a map from every reached tensor that requires a gradient to
    d(loss)/d(tensor).  Leaf tensors additionally accumulate into ``.grad``.
    The graph is released afterwards; a second call on the same loss raises.
    """
    if loss.shape != ():
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GraphError("loss does not depend on any tensor that requires a gradient")
    if loss.node is not None and loss.node.released:
        raise GraphError("graph already released by a previous backward pass")

    order = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
    result: dict[Tensor, np.ndarray] = {}
    for t in reversed(order):
        g = grads.get(id(t))
        if g is None:
            continue
        result[t] = g
        node = t.node
        if node is None:
            t.grad = g.copy() if t.grad is None else t.grad + g
            continue
        parent_grads = node.backward_fn(g)
        for parent, pg in zip(node.inputs, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            if pg.shape != parent.shape:
                raise GraphError(f"{node.kind}: gradient shape {pg.shape} != input shape {parent.shape}")
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for t in order:
        if t.node is not None:
            t.node.released = True
            t.node.backward_fn = _released_backward
    return result


def _released_backward(_):
    raise GraphError("graph already released by a previous backward pass")


# --------------------------------------------------------------------------
# linear algebra and convolution
# --------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """(m, k) @ (k, n) -> (m, n)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    need_a, need_b = _needs((a, b))
    A, B = a.data, b.data

    def bw(g):
        return (g @ B.T if need_a else None, A.T @ g if need_b else None)

    m, k = A.shape
    return _record("matmul", A @ B, (a, b), bw, flops=2 * m * k * B.shape[1])


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation, NCHW input, (out, in, kh, kw) kernel, optional bias."""
    if x.data.ndim != 4 or w.data.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: incompatible shapes input {x.shape} and kernel {w.shape}")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeError(f"conv2d: bias shape {b.shape} does not match kernel {w.shape}")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    N, C, H, W = x.shape
    O, _, kh, kw = w.shape
    Ho, Wo = _conv_out(H, kh, stride, padding), _conv_out(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"conv2d: kernel {w.shape} larger than padded input {x.shape}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    # windows: (N, C, Ho, Wo, kh, kw)
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = out.transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    inputs = (x, w) if b is None else (x, w, b)
    needs = _needs(inputs)
    W_ = w.data

    def bw(g):
        gx = gw = gb = None
        if needs[0]:
            gcols = np.tensordot(g, W_, axes=([1], [0]))  # (N, Ho, Wo, C, kh, kw)
            gxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += gcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        if needs[1]:
            gw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        if b is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return (gx, gw) if b is None else (gx, gw, gb)

    flops = 2 * N * O * C * kh * kw * Ho * Wo + (N * O * Ho * Wo if b is not None else 0)
    return _record("conv2d", out, inputs, bw, flops=flops, stride=stride, padding=padding)


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-channel vector ``b`` (shape (C,)) along axis 1 of ``x``."""
    if x.data.ndim < 2 or b.shape != (x.shape[1],):
        raise ShapeError(f"bias-add: bias shape {b.shape} does not match channel axis of {x.shape}")
    expand = (None, slice(None)) + (None,) * (x.data.ndim - 2)
    sum_axes = (0,) + tuple(range(2, x.data.ndim))
    need_x, need_b = _needs((x, b))

    def bw(g):
        return (g if need_x else None, g.sum(axis=sum_axes) if need_b else None)

    return _record("bias-add", x.data + b.data[expand], (x, b), bw, flops=x.size)


# --------------------------------------------------------------------------
# elementwise
# --------------------------------------------------------------------------


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)
    return _record("add", a.data + b.data, (a, b), lambda g: (g, g), flops=a.size)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)
    return _record("sub", a.data - b.data, (a, b), lambda g: (g, -g), flops=a.size)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("elementwise-mul", a, b)
    A, B = a.data, b.data
    return _record("elementwise-mul", A * B, (a, b), lambda g: (g * B, g * A), flops=a.size)


def scalar_mul(x: Tensor, s) -> Tensor:
    """Multiply every element of ``x`` by a scalar (float or one-element tensor)."""
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scalar-mul: scalar operand must have one element, got shape {s.shape}")
        sv = float(s.data.reshape(-1)[0])
        X = x.data
        s_shape = s.shape

        def bw(g):
            return (g * sv, np.full(s_shape, float(np.sum(g * X))))

        return _record("scalar-mul", X * sv, (x, s), bw, flops=x.size)
    sv = float(s)
    return _record("scalar-mul", x.data * sv, (x,), lambda g: (g * sv,), flops=x.size)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    # np.maximum keeps NaN visible to the divergence check
    return _record("relu", np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), flops=x.size)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _stable_sigmoid(np.asarray(x.data, dtype=np.float64))
    return _record("sigmoid", s, (x,), lambda g: (g * s * (1.0 - s),), flops=x.size)


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise ValueError("log: input must be strictly positive")
    X = x.data
    return _record("log", np.log(X), (x,), lambda g: (g / X,), flops=x.size)


def absolute(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    return _record("abs", np.abs(x.data), (x,), lambda g: (g * sign,), flops=x.size)


# --------------------------------------------------------------------------
# structural
# --------------------------------------------------------------------------


def concat(tensors: Sequence[Tensor], axis: int = 1) -> Tensor:
    """Concatenate along ``axis``; all other extents must agree."""
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("concat: need at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if len(t.shape) != len(ref) or any(a != b for i, (a, b) in enumerate(zip(t.shape, ref)) if i != ax):
            raise ShapeError(f"concat(axis={axis}): shape mismatch {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        return tuple(
            np.ascontiguousarray(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax))
            for i in range(len(tensors))
        )

    out = np.concatenate([t.data for t in tensors], axis=ax)
    return _record("concat", out, tensors, bw, axis=ax)


def narrow(x: Tensor, start: int, stop: int) -> Tensor:
    """Slice ``x[..., start:stop]`` along the last axis."""
    n = x.shape[-1]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"narrow: range [{start}, {stop}) invalid for shape {x.shape}")
    shape = x.shape

    def bw(g):
        out = np.zeros(shape)
        out[..., start:stop] = g
        return (out,)

    return _record("narrow", x.data[..., start:stop], (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def flatten(x: Tensor) -> Tensor:
    """(N, ...) -> (N, prod(...))."""
    old = x.shape
    if len(old) < 2:
        raise ShapeError(f"flatten: need at least 2 dims, got {old}")
    return _record("flatten", x.data.reshape(old[0], -1), (x,), lambda g: (g.reshape(old),))


def sum_components(tensors: Sequence[Tensor]) -> Tensor:
    """Elementwise sum of equally-shaped tensors.

    FLOPs are counted as ``k * numel`` (accumulation into a zero buffer), so
    each summed component carries the same cost.
    """
    tensors = tuple(tensors)
    if not tensors:
        raise ShapeError("sum-over-components: need at least one tensor")
    for t in tensors[1:]:
        _same_shape("sum-over-components", tensors[0], t)
    out = np.zeros(tensors[0].shape)
    for t in tensors:
        out = out + t.data
    k = len(tensors)
    return _record("sum-over-components", out, tensors, lambda g: (g,) * k, flops=k * tensors[0].size)


def total_sum(x: Tensor) -> Tensor:
    """Sum of all elements -> scalar (shape ())."""
    shape = x.shape
    return _record("total-sum", np.asarray(x.data.sum()), (x,), lambda g: (np.full(shape, float(g)),), flops=x.size)


def global_mean_pool(x: Tensor) -> Tensor:
    """(N, C, H, W) -> (N, C) spatial mean."""
    if x.data.ndim != 4:
        raise ShapeError(f"global-mean-pool: need NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    area = H * W

    def bw(g):
        return (np.broadcast_to((g / area)[:, :, None, None], (N, C, H, W)).copy(),)

    return _record("global-mean-pool", x.data.mean(axis=(2, 3)), (x,), bw, flops=x.size)


def max_pool2d(x: Tensor, k: int = 2) -> Tensor:
    """Non-overlapping k x k max pooling (trailing rows/cols that do not fit are dropped)."""
    if x.data.ndim != 4:
        raise ShapeError(f"max-pool2d: need NCHW input, got {x.shape}")
    N, C, H, W = x.shape
    Ho, Wo = H // k, W // k
    if Ho < 1 or Wo < 1:
        raise ShapeError(f"max-pool2d: window {k} larger than input {x.shape}")
    blocks = x.data[:, :, :Ho * k, :Wo * k].reshape(N, C, Ho, k, Wo, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho, Wo, k * k)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gb = np.zeros((N, C, Ho, Wo, k * k))
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gx = np.zeros((N, C, H, W))
        gx[:, :, :Ho * k, :Wo * k] = gb.reshape(N, C, Ho, Wo, k, k).transpose(0, 1, 2, 4, 3, 5).reshape(N, C, Ho * k, Wo * k)
        return (gx,)

    return _record("max-pool2d", out, (x,), bw, flops=N * C * Ho * Wo * (k * k - 1), k=k)


# --------------------------------------------------------------------------
# losses and gate normalization
# --------------------------------------------------------------------------


def softmax_cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-example cross-entropy of (N, K) logits against integer labels -> (N,)."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"softmax-cross-entropy: logits {logits.shape} vs labels {labels.shape}")
    K = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= K):
        raise ShapeError(f"softmax-cross-entropy: labels outside [0, {K})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(labels.size)
    loss = lse - z[rows, labels]
    probs = np.exp(z - lse[:, None])

    def bw(g):
        d = probs.copy()
        d[rows, labels] -= 1.0
        return (d * g[:, None],)

    return _record("softmax-cross-entropy", loss, (logits,), bw)


def batch_mean(x: Tensor) -> Tensor:
    """Mean of a 1-D tensor -> scalar (shape ())."""
    if x.data.ndim != 1 or x.size == 0:
        raise ShapeError(f"batch-mean: need a non-empty 1-D tensor, got {x.shape}")
    n = x.size
    return _record("batch-mean", np.asarray(x.data.mean()), (x,), lambda g: (np.full((n,), float(g) / n),), flops=n)


def normalize_gate(g: Tensor) -> Tensor:
    """g / ||g||_1 for a non-negative gate vector; the zero vector maps to zero."""
    if g.data.ndim != 1:
        raise ShapeError(f"normalize-gate: need a 1-D gate vector, got {g.shape}")
    s = float(np.abs(g.data).sum())
    if s == 0.0:
        return _record("normalize-gate", np.zeros(g.shape), (g,), lambda grad: (np.zeros(grad.shape),))
    gbar = g.data / s
    sign = np.sign(g.data)

    def bw(grad):
        return ((grad - sign * float(np.dot(grad, gbar))) / s,)

    return _record("normalize-gate", gbar, (g,), bw, flops=2 * g.size)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------


def finite_diff_check(
    fn: Callable[..., Tensor],
    inputs: Iterable,
    step: float = 1e-5,
    rng: np.random.Generator | None = None,
    jitter: float = 1e-3,
    wrt: Sequence[int] | None = None,
) -> float:
    """Compare ``backward`` against central differences for ``fn(*inputs)``.

    Inputs are nudged by a small random offset first so that kinks (relu at
    0, max-pool ties) are unlikely to sit exactly under the probe.  The output
    is reduced to a scalar through a fixed random projection so every output
    element contributes.  Returns the max over checked elements of
    ``|a - b| / max(1, |a|, |b|)``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    arrays = [np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64) for x in inputs]
    if jitter:
        arrays = [a + jitter * rng.standard_normal(a.shape) for a in arrays]
    wrt = range(len(arrays)) if wrt is None else wrt
    leaves = [Tensor(a, requires_grad=i in wrt) for i, a in enumerate(arrays)]
    out = fn(*leaves)
    proj = rng.standard_normal(out.shape)

    def scalar(vals):
        with no_grad():
            y = fn(*[Tensor(v) for v in vals])
        return float(np.sum(y.data * proj))

    loss = total_sum(mul(out, Tensor(proj)))
    backward(loss)
    worst = 0.0
    for i in wrt:
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros(arrays[i].shape)
        flat = arrays[i].reshape(-1)
        for j in range(flat.size):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i].reshape(-1)[j] += step
            minus[i].reshape(-1)[j] -= step
            numeric = (scalar(plus) - scalar(minus)) / (2 * step)
            a = float(analytic.reshape(-1)[j])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a), abs(numeric)))
    return worst
