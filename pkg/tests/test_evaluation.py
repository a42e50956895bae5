import numpy as np
import pytest

from conftest import small_net
from throttlenet.architectures import ArchConfig, build_network, glue_network_forward
from throttlenet.data import synth_dataset
from throttlenet.evaluation import (
    CURVE_HEADER,
    DEFAULT_GRID,
    CurveRecord,
    SweepSpec,
    auc,
    curve_csv,
    evaluate_at,
    flop_count,
    profile_csv,
    read_curve_csv,
    sweep,
    utilization_profile,
    write_curve_csv,
)
from throttlenet.gating import network_utilization
from throttlenet.strategies import ControllerParams, nested_k


def _rec(util, acc):
    return CurveRecord("nested", util, util, acc, 1.0)


def _testset(net, count=24, seed=0):
    return synth_dataset("blobs", count, seed=seed, n_classes=net.n_classes, shape=net.input_shape)


def test_auc_flat_curve():
    assert auc([_rec(0.2, 0.7), _rec(0.5, 0.7), _rec(0.9, 0.7)]) == pytest.approx(0.7, abs=1e-15)


def test_auc_triangle():
    assert auc([_rec(0.0, 0.0), _rec(0.5, 0.5), _rec(1.0, 1.0)]) == pytest.approx(0.5, abs=1e-15)


def test_auc_normalizes_by_span_and_needs_two_points():
    assert auc([_rec(0.4, 0.2), _rec(0.6, 0.4)]) == pytest.approx(0.3)
    with pytest.raises(ValueError):
        auc([_rec(0.5, 0.5)])


def test_record_validation():
    with pytest.raises(ValueError):
        CurveRecord("nested", 0.5, 1.2, 0.5, 10)
    with pytest.raises(ValueError):
        CurveRecord("nested", 0.5, 0.5, 0.5, 0)


def test_sweep_spec_validation():
    with pytest.raises(ValueError):
        SweepSpec(grid=(0.5, 0.2))
    with pytest.raises(ValueError):
        SweepSpec(grid=(1.5,))
    with pytest.raises(ValueError):
        SweepSpec(strategy="random")


def test_default_grid_gives_seventeen_records(arch):
    net = small_net(arch, n_classes=4)
    recs = sweep(net, SweepSpec(), _testset(net))
    assert len(recs) == 17 and [r.u_target for r in recs] == list(DEFAULT_GRID)


def test_nested_full_budget_is_full_utilization():
    net = small_net("t-resnext-w", n_classes=4)
    assert evaluate_at(net, "nested", 1.0, _testset(net)).utilization == 1.0


def test_nested_utilization_is_exact():
    net = small_net("t-resnext-w", n_classes=4)
    for u in DEFAULT_GRID:
        r = evaluate_at(net, "nested", u, _testset(net))
        expected = sum(nested_k(n, u) for n in net.module_sizes) / net.n_gates
        assert r.utilization == expected


def test_resnet_d_zero_budget_matches_glue_network():
    net = small_net("t-resnet-d", n_classes=4)
    ds = _testset(net)
    r = evaluate_at(net, "nested", 0.0, ds)
    glue_acc = float(np.mean(glue_network_forward(net, ds.images).data.argmax(1) == ds.labels))
    assert r.utilization == 0.0 and r.accuracy == glue_acc


def test_all_on_matches_dense_evaluation(arch):
    net = small_net(arch, n_classes=4)
    ds = _testset(net)
    r = evaluate_at(net, "all-on", 0.3, ds)
    dense = net.forward(ds.images, net.full_plan(), skip=False).data
    assert r.accuracy == float(np.mean(dense.argmax(1) == ds.labels)) and r.utilization == 1.0


def test_independent_utilization_matches_logged_plans():
    net = small_net("t-mlp", n_classes=4)
    r = evaluate_at(net, "independent", 0.5, _testset(net), rng=np.random.default_rng(0))
    total = sum(network_utilization(plan) * count for plan, count in r.plans)
    assert sum(c for _, c in r.plans) == 24
    assert abs(r.utilization - total / 24) <= 1e-12


def test_sweep_is_reproducible_and_thread_independent(monkeypatch):
    net = small_net("t-vgg", n_classes=4)
    ds = _testset(net)
    spec = SweepSpec(strategy="independent", seed=3)
    a = curve_csv(sweep(net, spec, ds))
    assert a == curve_csv(sweep(net, spec, ds))
    monkeypatch.setenv("THROTTLENET_THREADS", "4")
    assert a == curve_csv(sweep(net, spec, ds, threads=4))


def test_learned_sweep_needs_controller():
    net = small_net("t-mlp", n_classes=4)
    with pytest.raises(ValueError):
        sweep(net, SweepSpec(strategy="learned"), _testset(net))


def test_flops_extremes_and_half_budget():
    net = build_network(ArchConfig("t-resnext-w", n_components=4, widths=(4,), blocks=(1,), group_width=2,
                                   input_shape=(1, 4, 4)))
    off = net.make_plan([np.zeros(n) for n in net.module_sizes])
    assert flop_count(net, off) == net.glue_flops
    dense_gated = flop_count(net, net.full_plan()) - net.glue_flops
    assert dense_gated == sum(map(sum, net.component_flops))
    from throttlenet.strategies import static_plan

    assert 2 * (flop_count(net, static_plan(net, "nested", 0.5)) - net.glue_flops) == dense_gated


def test_nested_flops_nondecreasing_over_sweep(arch):
    net = small_net(arch, n_classes=4)
    flops = [r.flops for r in sweep(net, SweepSpec(), _testset(net))]
    assert flops == sorted(flops)


def test_static_profile_rows_equal_nested_fraction():
    net = small_net("t-resnext-w")
    for u, j, a in utilization_profile(net, strategy="nested"):
        assert a == nested_k(net.module_sizes[j], u) / net.module_sizes[j]


def test_profile_mean_equals_network_utilization():
    net = small_net("t-mlp")
    psi = ControllerParams.init(net.n_gates, rng=np.random.default_rng(0))
    rows = utilization_profile(net, controller=psi)
    from throttlenet.strategies import learned_plan

    for u in DEFAULT_GRID:
        per_module = [a for v, _, a in rows if v == u]
        weighted = np.dot(per_module, net.module_sizes) / net.n_gates
        assert weighted == pytest.approx(network_utilization(learned_plan(net, psi, u)), abs=1e-12)


def test_csv_format_and_roundtrip(tmp_path):
    recs = [CurveRecord("nested", 0.0625, 1 / 3, 0.123456789, 12345678.0)]
    text = curve_csv(recs)
    assert text.splitlines() == [",".join(CURVE_HEADER), "nested,0.0625,0.333333,0.123457,1.23457e+07"]
    write_curve_csv(tmp_path / "c.csv", recs)
    back = read_curve_csv(tmp_path / "c.csv")
    assert back[0].accuracy == 0.123457
    assert profile_csv([(0.5, 1, 0.25)]) == "u_target,module_id,mean_activation\n0.5,1,0.25\n"
