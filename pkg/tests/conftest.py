import numpy as np
import pytest

from throttlenet.architectures import ARCHITECTURES, ArchConfig, build_network
from throttlenet.gating import GateVector

# tiny networks that still exercise every structural feature
SMALL = {
    "t-mlp": dict(n_components=4, widths=(8, 8), input_shape=(1, 4, 4)),
    "t-vgg": dict(n_components=2, widths=(4, 4), blocks=(2, 1), fc_width=4, input_shape=(2, 4, 4)),
    "t-resnext-w": dict(n_components=3, widths=(4, 6), blocks=(2, 1), group_width=2, input_shape=(2, 4, 4)),
    "t-resnet-d": dict(widths=(4, 6), blocks=(3, 2), input_shape=(2, 4, 4)),
    "t-densenet": dict(widths=(4,), blocks=(3, 2), growth=2, input_shape=(2, 4, 4)),
}


def small_net(name, seed=0, n_classes=3):
    return build_network(ArchConfig(name, seed=seed, n_classes=n_classes, **SMALL[name]))


def random_plan(net, rng):
    """Uniformly random binary plan that honours each module's min-active count."""
    plan = []
    for m, w in zip(net.modules, net.module_weights):
        g = rng.integers(0, 2, m.n_components).astype(float)
        while g.sum() < m.min_active:
            g[rng.integers(m.n_components)] = 1.0
        plan.append(GateVector(g, w))
    return plan


@pytest.fixture(params=ARCHITECTURES)
def arch(request):
    return request.param
