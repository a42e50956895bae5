from collections import Counter

import numpy as np
import pytest

from conftest import random_plan, small_net
from throttlenet.architectures import ArchConfig, DenseBlock, build_network, glue_network_forward
from throttlenet.evaluation import DEFAULT_GRID, flop_count, measured_flops
from throttlenet.gating import GateError, GateVector
from throttlenet.strategies import static_plan
from throttlenet.tensor import Tensor


def test_resnext_three_stages_of_sixteen():
    net = build_network(ArchConfig("t-resnext-w", n_components=16, widths=(8, 8, 8), blocks=(1, 1, 1),
                                   input_shape=(1, 8, 8)))
    assert net.module_sizes == [16, 16, 16] and net.n_gates == 48


def test_vgg_single_component_is_ungated():
    net = build_network(ArchConfig("t-vgg", n_components=1, widths=(4, 4), blocks=(1, 1), fc_width=4,
                                   input_shape=(1, 4, 4)))
    assert all(m.min_active == 1 and m.n_components == 1 for m in net.modules)
    with pytest.raises(GateError):
        net.forward(np.zeros((1, 1, 4, 4)), [GateVector([0.0])] * len(net.modules))


def test_densenet_channel_table():
    net = build_network(ArchConfig("t-densenet", widths=(24,), blocks=(16, 16, 16), growth=12,
                                   input_shape=(3, 32, 32)))
    blocks = [it for it in net.items if isinstance(it, DenseBlock)]
    # hand-computed: 24 -> 216, halve to 108 -> 300, halve to 150 -> 342
    assert [b.in_ch for b in blocks] == [24, 108, 150]
    assert [b.out_shape((b.in_ch, 8, 8))[0] for b in blocks] == [216, 300, 342]


def test_resnet_d_all_off_is_glue_only():
    net = small_net("t-resnet-d")
    x = np.random.default_rng(0).standard_normal((3, 2, 4, 4))
    off = net.make_plan([np.zeros(n) for n in net.module_sizes])
    np.testing.assert_allclose(net.forward(x, off).data, glue_network_forward(net, x).data, rtol=1e-12)


def test_glue_forward_rejects_width_modules():
    with pytest.raises(ValueError):
        glue_network_forward(small_net("t-vgg"), np.zeros((1, 2, 4, 4)))


def test_all_ones_plan_equals_dense(arch):
    net = small_net(arch)
    x = np.random.default_rng(1).standard_normal((2,) + net.input_shape)
    a = net.forward(x, net.full_plan()).data
    b = net.forward(x, net.full_plan(), skip=False).data
    assert np.max(np.abs(a - b) / np.maximum(1, np.abs(b))) <= 1e-9


def test_skip_matches_masked_oracle_on_random_plans(arch):
    net = small_net(arch)
    rng = np.random.default_rng(2)
    for _ in range(50):
        x = rng.standard_normal((2,) + net.input_shape)
        plan = random_plan(net, rng)
        counters = {}
        fast = net.forward(x, plan, counters=counters).data
        ref = net.forward(x, plan, skip=False).data
        assert fast.shape == (2, net.n_classes)
        assert np.max(np.abs(fast - ref) / np.maximum(1, np.abs(ref))) <= 1e-9
        for j, g in enumerate(plan):
            assert set(counters.get(j, Counter())) == set(np.flatnonzero(g.active))


def test_identical_inputs_give_identical_rows(arch):
    net = small_net(arch)
    x = np.repeat(np.random.default_rng(3).standard_normal((1,) + net.input_shape), 2, axis=0)
    out = net.forward(x, net.full_plan()).data
    assert out[0].tobytes() == out[1].tobytes()


def test_analytic_flops_match_measured(arch):
    net = small_net(arch)
    rng = np.random.default_rng(4)
    x = rng.standard_normal((1,) + net.input_shape)
    for _ in range(10):
        plan = random_plan(net, rng)
        assert flop_count(net, plan) == measured_flops(net, plan, x)


def test_nested_flops_monotone(arch):
    net = small_net(arch)
    costs = [flop_count(net, static_plan(net, "nested", u)) for u in DEFAULT_GRID]
    assert costs == sorted(costs)


def test_vgg_static_plans_keep_one_group_per_layer():
    net = small_net("t-vgg")
    rng = np.random.default_rng(5)
    for u in DEFAULT_GRID:
        for strategy in ("nested", "independent", "depthwise"):
            plan = static_plan(net, strategy, u, rng)
            assert all(g.active.sum() >= 1 for g in plan)


def test_plan_size_mismatch_rejected():
    net = small_net("t-mlp")
    with pytest.raises(GateError):
        net.forward(np.zeros((1, 1, 4, 4)), net.full_plan()[:-1])
    with pytest.raises(GateError):
        net.forward(np.zeros((1, 1, 4, 4)), [GateVector.ones(3)] + net.full_plan()[1:])


def test_bad_configs_rejected():
    with pytest.raises(ValueError):
        build_network(ArchConfig("t-vgg", n_components=3, widths=(4,), blocks=(1,), fc_width=6))
    with pytest.raises(ValueError):
        build_network(ArchConfig("nope"))
    with pytest.raises(ValueError):
        build_network(ArchConfig("t-resnext-w", widths=(4, 4), blocks=(1,)))


def test_state_dict_roundtrip(arch):
    a, b = small_net(arch, seed=0), small_net(arch, seed=1)
    assert a.checksum() != b.checksum()
    b.load_state_dict(a.state_dict())
    assert a.checksum() == b.checksum()


def test_input_shape_checked():
    net = small_net("t-resnext-w")
    with pytest.raises(Exception):
        net.forward(Tensor(np.zeros((1, 3, 4, 4))), net.full_plan())
