"""Throttleable network architectures at desk scale.

=================  =====  =========================  ===========
architecture       axis   component                  aggregation
=================  =====  =========================  ===========
``t-vgg``          width  conv filter group          concat
``t-resnext-w``    width  bottleneck filter group    sum
``t-resnet-d``     depth  residual block             sum
``t-densenet``     width  narrow dense layer         concat
``t-mlp``          width  hidden-unit group          concat
=================  =====  =========================  ===========

Gates are shared across a stage: component ``i`` of a VGG or ResNeXt stage
is the ``i``-th filter group in every layer/block of that stage.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .gating import GatedModule, GateError, GateVector, ParallelGatedModule, network_utilization
from .nn import Conv2d, Flatten, GlobalMeanPool, Layer, Linear, MaxPool2d, ReLU, Sequential
from .tensor import Tensor

ARCHITECTURES = ("t-mlp", "t-vgg", "t-resnext-w", "t-resnet-d", "t-densenet")


# --------------------------------------------------------------------------
# gated stage modules
# --------------------------------------------------------------------------


def concat_gain(n: int) -> float:
    """Init gain for layers fed by a normalized concat of ``n`` groups.

    With ``k`` groups active the normalized gate scales the next layer's
    pre-activation variance by ``gain**2 / (n * k)``.  The gain makes the
    geometric mean of that factor over ``k = 1..n`` equal to one, so the
    signal neither explodes on narrow plans nor vanishes on wide ones.
    """
    mean_log_k = sum(math.log(k) for k in range(1, n + 1)) / n
    return math.sqrt(n * math.exp(mean_log_k))


class VGGStage(GatedModule):
    """A run of 3x3 conv layers, each split into ``n`` concatenated filter groups."""

    axis = "width"
    aggregation = "concat"

    def __init__(self, in_ch: int, width: int, n_layers: int, n: int, rng, min_active: int = 1,
                 in_gain: float = 1.0):
        super().__init__(n, min_active)
        if width % n:
            raise ValueError(f"stage width {width} is not divisible by {n} components")
        self.group = width // n
        self.layers = []
        for layer in range(n_layers):
            c_in = in_ch if layer == 0 else width
            # inputs that come out of a normalized concat are n times smaller at full width
            gain = in_gain if layer == 0 else concat_gain(n)
            self.layers.append([Conv2d(c_in, self.group, 3, rng=rng, gain=gain) for _ in range(n)])

    def forward(self, x, gate, *, skip=True, counter=None):
        self.check_gate(gate)
        active, scales = gate.active, self.scales(gate)
        B, _, H, W = x.shape
        h = x
        for convs in self.layers:
            outs = []
            for i, conv in enumerate(convs):
                if skip and not active[i]:
                    outs.append(Tensor(np.zeros((B, self.group, H, W))))
                    continue
                outs.append(T.scalar_mul(T.relu(conv(h)), scales[i]))
                if counter is not None:
                    counter[i] += B
            h = T.concat(outs, axis=1)
        return h

    def parameters(self, prefix=""):
        out = {}
        for l, convs in enumerate(self.layers):
            for i, conv in enumerate(convs):
                out.update(conv.parameters(f"{prefix}l{l}.c{i}."))
        return out

    def out_shape(self, in_shape):
        return (self.group * self.n_components,) + tuple(in_shape[1:])

    def component_flops(self, in_shape):
        costs = [0] * self.n_components
        shape = tuple(in_shape)
        for convs in self.layers:
            for i, conv in enumerate(convs):
                o = conv.out_shape(shape)
                costs[i] += conv.flops(shape) + 2 * math.prod(o)  # conv + relu + scale
            shape = self.out_shape(shape)
        return costs


class ResNeXtStage(GatedModule):
    """Residual blocks whose transform is a sum of ``n`` bottleneck groups."""

    axis = "width"
    aggregation = "sum"

    def __init__(self, channels: int, group_width: int, n_blocks: int, n: int, rng):
        super().__init__(n, 0)
        self.channels = channels
        self.blocks = []
        for _ in range(n_blocks):
            self.blocks.append([
                Sequential([Conv2d(channels, group_width, 1, rng=rng), ReLU(),
                            Conv2d(group_width, group_width, 3, rng=rng), ReLU(),
                            Conv2d(group_width, channels, 1, rng=rng)])
                for _ in range(n)
            ])

    def forward(self, x, gate, *, skip=True, counter=None):
        self.check_gate(gate)
        active, scales = gate.active, self.scales(gate)
        B = x.shape[0]
        h = x
        for paths in self.blocks:
            outs = []
            for i, path in enumerate(paths):
                if skip and not active[i]:
                    continue
                outs.append(T.scalar_mul(path(h), scales[i]))
                if counter is not None:
                    counter[i] += B
            agg = T.sum_components(outs) if outs else Tensor(np.zeros(h.shape))
            h = T.relu(T.add(h, agg))
        return h

    def parameters(self, prefix=""):
        out = {}
        for b, paths in enumerate(self.blocks):
            for i, path in enumerate(paths):
                out.update(path.parameters(f"{prefix}b{b}.c{i}."))
        return out

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise T.ShapeError(f"resnext stage expects {self.channels} channels, got {in_shape}")
        return tuple(in_shape)

    def component_flops(self, in_shape):
        numel = math.prod(in_shape)
        return [sum(paths[i].flops(tuple(in_shape)) + 2 * numel for paths in self.blocks)
                for i in range(self.n_components)]

    def glue_flops(self, in_shape):
        return 2 * math.prod(in_shape) * len(self.blocks)  # residual add + relu


class DepthStage(GatedModule):
    """Residual blocks gated as a whole; a skipped block is the identity."""

    axis = "depth"
    aggregation = "sum"
    normalize = False

    def __init__(self, channels: int, n_blocks: int, rng):
        super().__init__(n_blocks, 0)
        self.channels = channels
        self.blocks = [Sequential([Conv2d(channels, channels, 3, rng=rng), ReLU(),
                                   Conv2d(channels, channels, 3, rng=rng)])
                       for _ in range(n_blocks)]

    def forward(self, x, gate, *, skip=True, counter=None):
        self.check_gate(gate)
        active, scales = gate.active, self.scales(gate)
        B = x.shape[0]
        h = x
        for i, block in enumerate(self.blocks):
            if skip and not active[i]:
                continue
            h = T.relu(T.add(h, T.scalar_mul(block(h), scales[i])))
            if counter is not None:
                counter[i] += B
        return h

    def parameters(self, prefix=""):
        out = {}
        for i, block in enumerate(self.blocks):
            out.update(block.parameters(f"{prefix}c{i}."))
        return out

    def out_shape(self, in_shape):
        if in_shape[0] != self.channels:
            raise T.ShapeError(f"depth stage expects {self.channels} channels, got {in_shape}")
        return tuple(in_shape)

    def component_flops(self, in_shape):
        numel = math.prod(in_shape)
        return [b.flops(tuple(in_shape)) + 3 * numel for b in self.blocks]  # scale + add + relu


class DenseBlock(GatedModule):
    """Narrow layers that each see the concatenation of all earlier outputs.

    A gated-off layer contributes a zero slab of ``growth`` channels so every
    downstream shape is gate-independent.
    """

    axis = "width"
    aggregation = "concat"

    def __init__(self, in_ch: int, n_layers: int, growth: int, rng, bottleneck: int = 4):
        super().__init__(n_layers, 0)
        self.in_ch = in_ch
        self.growth = growth
        self.layers = []
        for i in range(n_layers):
            c = in_ch + i * growth
            self.layers.append(Sequential([ReLU(), Conv2d(c, bottleneck * growth, 1, rng=rng), ReLU(),
                                           Conv2d(bottleneck * growth, growth, 3, rng=rng)]))

    def forward(self, x, gate, *, skip=True, counter=None):
        self.check_gate(gate)
        active, scales = gate.active, self.scales(gate)
        B, _, H, W = x.shape
        feats = [x]
        for i, layer in enumerate(self.layers):
            if skip and not active[i]:
                feats.append(Tensor(np.zeros((B, self.growth, H, W))))
                continue
            feats.append(T.scalar_mul(layer(T.concat(feats, axis=1)), scales[i]))
            if counter is not None:
                counter[i] += B
        return T.concat(feats, axis=1)

    def parameters(self, prefix=""):
        out = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.parameters(f"{prefix}c{i}."))
        return out

    def out_shape(self, in_shape):
        if in_shape[0] != self.in_ch:
            raise T.ShapeError(f"dense block expects {self.in_ch} channels, got {in_shape}")
        return (self.in_ch + self.n_components * self.growth,) + tuple(in_shape[1:])

    def component_flops(self, in_shape):
        _, H, W = in_shape
        return [layer.flops((self.in_ch + i * self.growth, H, W)) + self.growth * H * W
                for i, layer in enumerate(self.layers)]


# --------------------------------------------------------------------------
# network container
# --------------------------------------------------------------------------


@dataclass
class ArchConfig:
    """Architecture hyper-parameters.  ``None`` fields take per-architecture defaults."""

    name: str = "t-mlp"
    n_components: int = 16
    widths: Sequence[int] | None = None
    blocks: Sequence[int] | None = None
    fc_width: int | None = None
    group_width: int = 4
    growth: int = 12
    input_shape: Sequence[int] = (3, 32, 32)
    n_classes: int = 10
    seed: int = 0

    def resolved(self) -> "ArchConfig":
        d = DEFAULTS.get(self.name)
        if d is None:
            raise ValueError(f"unknown architecture {self.name!r}; choose from {ARCHITECTURES}")
        cfg = ArchConfig(**asdict(self))
        if cfg.widths is None:
            cfg.widths = d["widths"]
        if cfg.blocks is None:
            # an MLP has one gated layer per width
            cfg.blocks = (1,) * len(cfg.widths) if cfg.name == "t-mlp" else d["blocks"]
        if cfg.fc_width is None:
            cfg.fc_width = d.get("fc_width", 0)
        cfg.widths = tuple(int(w) for w in cfg.widths)
        cfg.blocks = tuple(int(b) for b in (cfg.blocks if not isinstance(cfg.blocks, int) else [cfg.blocks] * len(cfg.widths)))
        cfg.input_shape = tuple(int(s) for s in cfg.input_shape)
        return cfg

    def validate(self) -> None:
        c = self.resolved()
        if c.n_components < 1:
            raise ValueError("n_components must be >= 1")
        if c.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        if c.name == "t-densenet":
            if len(c.widths) != 1:
                raise ValueError("t-densenet takes a single initial width; blocks lists layers per dense block")
        elif len(c.blocks) != len(c.widths):
            raise ValueError(f"blocks {c.blocks} and widths {c.widths} must have one entry per stage")
        if any(w < 1 for w in c.widths) or any(b < 1 for b in c.blocks):
            raise ValueError("widths and block counts must be positive")
        if c.name in ("t-vgg", "t-mlp"):
            bad = [w for w in c.widths if w % c.n_components]
            if c.fc_width and c.fc_width % c.n_components:
                bad.append(c.fc_width)
            if bad:
                raise ValueError(f"widths {bad} are not divisible by n_components={c.n_components}")
        if c.name != "t-mlp" and len(c.input_shape) != 3:
            raise ValueError(f"{c.name} needs a (channels, height, width) input shape, got {c.input_shape}")


DEFAULTS = {
    "t-mlp": {"widths": (64, 64), "blocks": (1, 1)},
    "t-vgg": {"widths": (64, 128, 256), "blocks": (2, 2, 3), "fc_width": 256},
    "t-resnext-w": {"widths": (64, 128, 256), "blocks": (3, 3, 3)},
    "t-resnet-d": {"widths": (16, 32, 64), "blocks": (4, 4, 4)},
    "t-densenet": {"widths": (24,), "blocks": (16, 16, 16)},
}


class ThrottleableNetwork:
    """An ordered mix of ungated glue layers and gated modules.

    ``forward(x, plan)`` runs the network with one :class:`GateVector` per
    gated module.  Per-component and glue FLOPs are priced at construction
    from the input shape.
    """

    def __init__(self, name: str, items: Sequence[Layer | GatedModule], input_shape, n_classes: int,
                 config: ArchConfig | None = None):
        self.name = name
        self.items = list(items)
        self.input_shape = tuple(input_shape)
        self.n_classes = n_classes
        self.config = config
        self.modules = [it for it in self.items if isinstance(it, GatedModule)]
        self.module_sizes = [m.n_components for m in self.modules]
        self.module_weights = [np.ones(n) for n in self.module_sizes]
        self._price()

    def _price(self) -> None:
        shape = self.input_shape
        self.glue_flops = 0
        self.component_flops: list[list[int]] = []
        for it in self.items:
            if isinstance(it, GatedModule):
                self.component_flops.append([int(c) for c in it.component_flops(shape)])
                self.glue_flops += int(it.glue_flops(shape))
            else:
                self.glue_flops += int(it.flops(shape))
            shape = it.out_shape(shape)
        if shape != (self.n_classes,):
            raise T.ShapeError(f"{self.name}: network output shape {shape} != ({self.n_classes},)")
        if any(c <= 0 for costs in self.component_flops for c in costs):
            raise ValueError(f"{self.name}: every gated component needs a positive FLOP cost")

    @property
    def n_gates(self) -> int:
        return sum(self.module_sizes)

    def flop_weights(self) -> list[np.ndarray]:
        """Resource weights proportional to each component's FLOPs."""
        return [np.asarray(c, dtype=np.float64) for c in self.component_flops]

    def use_flop_weights(self, enabled: bool = True) -> None:
        self.module_weights = self.flop_weights() if enabled else [np.ones(n) for n in self.module_sizes]

    def check_plan(self, plan) -> None:
        if len(plan) != len(self.modules):
            raise GateError(f"plan has {len(plan)} gate vectors, network has {len(self.modules)} gated modules")
        for j, (g, m) in enumerate(zip(plan, self.modules)):
            if g.n != m.n_components:
                raise GateError(f"module {j}: gate has {g.n} entries, module has {m.n_components} components")

    def full_plan(self) -> list[GateVector]:
        return [GateVector(np.ones(n), w) for n, w in zip(self.module_sizes, self.module_weights)]

    def make_plan(self, arrays) -> list[GateVector]:
        return [GateVector(a, w) for a, w in zip(arrays, self.module_weights)]

    def forward(self, x, plan, *, skip: bool = True, counters: dict | None = None) -> Tensor:
        """Logits of shape (batch, classes).

        ``counters`` (optional) maps module index to a ``Counter`` of
        per-component evaluations, advanced in examples.
        """
        self.check_plan(plan)
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.shape[1:] != self.input_shape:
            raise T.ShapeError(f"{self.name}: input shape {x.shape[1:]} != {self.input_shape}")
        j = 0
        for it in self.items:
            if isinstance(it, GatedModule):
                counter = None if counters is None else counters.setdefault(j, Counter())
                x = it.forward(x, plan[j], skip=skip, counter=counter)
                j += 1
            else:
                x = it(x)
        return x

    __call__ = forward

    def flop_count(self, plan) -> int:
        """Per-example FLOPs: glue plus the cost of every active component."""
        self.check_plan(plan)
        return self.glue_flops + sum(int(np.dot(costs, g.active)) for costs, g in zip(self.component_flops, plan))

    def utilization(self, plan) -> float:
        return network_utilization(plan)

    def parameters(self) -> dict[str, Tensor]:
        out = {}
        for k, it in enumerate(self.items):
            out.update(it.parameters(f"{k}."))
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        missing = set(params) - set(state)
        extra = set(state) - set(params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for k, t in params.items():
            if state[k].shape != t.shape:
                raise T.ShapeError(f"{k}: checkpoint shape {state[k].shape} != parameter shape {t.shape}")
            t.data = Tensor(state[k]).data

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters().values():
            t.requires_grad = flag
            t.grad = None

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, t in sorted(self.parameters().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


# --------------------------------------------------------------------------
# builders
# --------------------------------------------------------------------------


def _build_mlp(c: ArchConfig, rng):
    n = c.n_components
    size = math.prod(c.input_shape)
    items: list = [Flatten()] if len(c.input_shape) > 1 else []
    gain = 1.0
    for width in c.widths:
        group = width // n
        items.append(ParallelGatedModule([Sequential([Linear(size, group, rng=rng, gain=gain), ReLU()])
                                          for _ in range(n)], aggregation="concat", min_active=1))
        size, gain = width, concat_gain(n)
    items.append(Linear(size, c.n_classes, rng=rng, gain=gain))
    return items


def _build_vgg(c: ArchConfig, rng):
    n = c.n_components
    ch, H, W = c.input_shape
    items: list = []
    for s, (width, n_layers) in enumerate(zip(c.widths, c.blocks)):
        items.append(VGGStage(ch, width, n_layers, n, rng, in_gain=1.0 if s == 0 else concat_gain(n)))
        items.append(MaxPool2d(2))
        ch, H, W = width, H // 2, W // 2
        if H < 1 or W < 1:
            raise ValueError(f"input {c.input_shape} too small for {len(c.widths)} pooling stages")
    items.append(Flatten())
    flat = ch * H * W
    group = c.fc_width // n
    items.append(ParallelGatedModule([Sequential([Linear(flat, group, rng=rng, gain=concat_gain(n)), ReLU()])
                                      for _ in range(n)], aggregation="concat", min_active=1))
    items.append(Linear(c.fc_width, c.n_classes, rng=rng, gain=concat_gain(n)))
    return items


def _build_resnext(c: ArchConfig, rng):
    ch = c.input_shape[0]
    items: list = []
    for s, (width, n_blocks) in enumerate(zip(c.widths, c.blocks)):
        # 1x1 projection between stages: spatial filtering lives in the gated groups
        k = 3 if s == 0 else 1
        items += [Conv2d(ch, width, k, stride=1 if s == 0 else 2, rng=rng), ReLU()]
        items.append(ResNeXtStage(width, c.group_width, n_blocks, c.n_components, rng))
        ch = width
    items += [GlobalMeanPool(), Linear(ch, c.n_classes, rng=rng)]
    return items


def _build_resnet_d(c: ArchConfig, rng):
    ch = c.input_shape[0]
    items: list = []
    for s, (width, n_blocks) in enumerate(zip(c.widths, c.blocks)):
        items += [Conv2d(ch, width, 3, stride=1 if s == 0 else 2, rng=rng), ReLU()]
        items.append(DepthStage(width, n_blocks, rng))
        ch = width
    items += [GlobalMeanPool(), Linear(ch, c.n_classes, rng=rng)]
    return items


def _build_densenet(c: ArchConfig, rng):
    ch = c.widths[0]
    items: list = [Conv2d(c.input_shape[0], ch, 3, rng=rng)]
    H = c.input_shape[1]
    for b, n_layers in enumerate(c.blocks):
        block = DenseBlock(ch, n_layers, c.growth, rng)
        items.append(block)
        ch = ch + n_layers * c.growth
        if b < len(c.blocks) - 1:
            out = ch // 2
            items += [ReLU(), Conv2d(ch, out, 1, rng=rng), MaxPool2d(2)]
            ch, H = out, H // 2
            if H < 1:
                raise ValueError(f"input {c.input_shape} too small for {len(c.blocks)} dense blocks")
    items += [ReLU(), GlobalMeanPool(), Linear(ch, c.n_classes, rng=rng)]
    return items


_BUILDERS = {
    "t-mlp": _build_mlp,
    "t-vgg": _build_vgg,
    "t-resnext-w": _build_resnext,
    "t-resnet-d": _build_resnet_d,
    "t-densenet": _build_densenet,
}


def build_network(cfg: ArchConfig) -> ThrottleableNetwork:
    """Instantiate a throttleable network from an :class:`ArchConfig`."""
    cfg.validate()
    c = cfg.resolved()
    rng = np.random.default_rng(c.seed)
    items = _BUILDERS[c.name](c, rng)
    return ThrottleableNetwork(c.name, items, c.input_shape, c.n_classes, config=c)


def glue_network_forward(net: ThrottleableNetwork, x) -> Tensor:
    """Run only the ungated layers (a depth-gated trunk reduced to identities)."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    for it in net.items:
        if isinstance(it, GatedModule):
            if it.axis != "depth":
                raise ValueError("only depth-gated modules reduce to the identity when fully off")
            continue
        x = it(x)
    return x
