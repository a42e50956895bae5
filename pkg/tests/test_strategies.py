import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from throttlenet import tensor as T
from throttlenet.gating import GateVector
from throttlenet.strategies import (
    ControllerParams,
    controller_forward,
    controller_vjp,
    depthwise_nested_gate,
    enforce_min_active,
    independent_gate,
    learned_plan,
    log_prob,
    modified_sigmoid,
    nested_gate,
    nested_k,
    reinforce_grad,
    sample_bernoulli,
    sample_concrete,
    score,
    split_by_module,
    test_time_gate as hard_gate,
)
from throttlenet.tensor import Tensor

U_GRID = np.linspace(0.0, 1.0, 1001)


def test_nested_k_examples():
    assert nested_k(16, 1.0) == 16
    assert nested_k(16, 0.0) == 0
    assert nested_k(16, 0.5) == 8


@given(st.integers(1, 64), st.floats(0, 1))
def test_nested_k_formula(n, u):
    assert nested_k(n, u) == min(n, math.floor(u * (n + 1)))


def test_nested_k_monotone_on_grid():
    for n in (1, 3, 16):
        ks = [nested_k(n, u) for u in U_GRID]
        assert ks == sorted(ks)


def test_nested_k_of_uniform_u_is_discrete_uniform():
    rng = np.random.default_rng(0)
    n = 7
    ks = [nested_k(n, u) for u in rng.random(100_000)]
    counts = np.bincount(ks, minlength=n + 1)
    assert stats.chisquare(counts).pvalue > 0.001


def test_nested_gate_examples():
    np.testing.assert_array_equal(nested_gate(4, 0.5).array, [1, 1, 0, 0])
    np.testing.assert_array_equal(nested_gate(4, 1.0).array, [1, 1, 1, 1])


def _is_prefix(a):
    a = np.asarray(a)
    k = int(a.sum())
    return bool(np.all(a[:k] == 1) and np.all(a[k:] == 0))


@given(st.integers(1, 20), st.floats(0, 1), st.floats(0, 1))
def test_nested_gate_superset_and_prefix(n, u1, u2):
    lo, hi = sorted((u1, u2))
    a, b = nested_gate(n, lo).active, nested_gate(n, hi).active
    assert np.all(b[a])
    assert _is_prefix(a) and _is_prefix(b)


def test_independent_gate_extremes():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(independent_gate(4, 1.0, rng).array, np.ones(4))
    np.testing.assert_array_equal(independent_gate(4, 0.0, rng).array, np.zeros(4))


def test_independent_gate_marginals():
    rng = np.random.default_rng(0)
    draws = np.array([independent_gate(3, 0.5, rng).array for _ in range(100_000)])
    assert np.all(draws.sum(axis=1) == 2)
    np.testing.assert_allclose(draws.mean(axis=0), 2 / 3, atol=0.01)


def test_depthwise_examples():
    def counts(u):
        return [int(g.active.sum()) for g in depthwise_nested_gate([4, 4, 4], u)]

    assert counts(1.0) == [4, 4, 4]
    assert counts(0.0) == [0, 0, 0]
    assert counts(0.5) == [2, 2, 2]


def _depthwise_reference(sizes, u):
    """Direct simulation of the round-robin rule, one candidate layer at a time."""
    active = [0] * len(sizes)
    total = sum(sizes)
    while True:
        added = False
        for s in reversed(range(len(sizes))):
            if active[s] == sizes[s] or (active[s] + 1) / sizes[s] > u:
                continue
            if (sum(active) + 1) / total > u:
                return active
            active[s] += 1
            added = True
        if not added:
            return active


def test_depthwise_matches_reference_trace():
    rng = np.random.default_rng(0)
    for _ in range(50):
        sizes = list(rng.integers(1, 7, rng.integers(1, 5)))
        u = float(rng.random())
        plan = depthwise_nested_gate(sizes, u)
        assert [int(g.active.sum()) for g in plan] == _depthwise_reference(sizes, u)
        assert all(_is_prefix(g.array) for g in plan)


def test_enforce_min_active_uses_priority():
    np.testing.assert_array_equal(enforce_min_active(np.zeros(3), 1, [0.1, 0.7, 0.3]), [0, 1, 0])
    np.testing.assert_array_equal(enforce_min_active(np.array([0, 0, 1.0]), 1), [0, 0, 1])


# controller


def test_modified_sigmoid_properties():
    z = Tensor(np.array([0.0, 1e3, -1e3]))
    out = modified_sigmoid(z, 0.8).data
    assert out[0] == 0.5
    assert out[1] == pytest.approx(0.8, abs=1e-12) and out[2] == pytest.approx(0.2, abs=1e-12)


def test_controller_output_bounds():
    psi = ControllerParams.init(10, rng=np.random.default_rng(0), alpha=0.99)
    psi.w2 = Tensor(psi.w2.data * 1e4, requires_grad=True)
    p = controller_forward(psi, np.linspace(0, 1, 11)).data
    assert p.shape == (11, 10)
    assert np.all(p >= 0.01 - 1e-15) and np.all(p <= 0.99 + 1e-15)


def test_controller_alpha_validated():
    with pytest.raises(ValueError):
        ControllerParams.init(3, alpha=0.5)
    with pytest.raises(ValueError):
        controller_forward(ControllerParams.init(3), 1.5)


def test_controller_state_roundtrip():
    psi = ControllerParams.init(6, rng=np.random.default_rng(1), alpha=0.9)
    back = ControllerParams.from_state_dict(psi.state_dict())
    assert back.alpha == 0.9
    np.testing.assert_array_equal(controller_forward(back, 0.3).data, controller_forward(psi, 0.3).data)


def test_controller_gradcheck():
    psi = ControllerParams.init(4, hidden=6, rng=np.random.default_rng(2), alpha=0.85)

    def fn(w1, b1, w2, b2):
        return controller_forward(ControllerParams(w1, b1, w2, b2, alpha=0.85), np.array([0.1, 0.9]))

    assert T.finite_diff_check(fn, [t.data for t in psi.parameters().values()]) < 1e-4


def test_sample_bernoulli_examples():
    rng = np.random.default_rng(0)
    np.testing.assert_array_equal(sample_bernoulli(np.ones(5), rng), np.ones(5))
    np.testing.assert_array_equal(sample_bernoulli(np.zeros(5), rng), np.zeros(5))
    assert abs(sample_bernoulli(np.full(100_000, 0.3), rng).mean() - 0.3) < 0.005


def test_log_prob_examples():
    assert log_prob([1], [0.5]) == pytest.approx(math.log(0.5), abs=1e-15)
    assert log_prob([1, 0], [0.6, 0.6]) == pytest.approx(math.log(0.6) + math.log(0.4), abs=1e-15)


def test_log_prob_normalizes():
    p = np.random.default_rng(0).uniform(0.05, 0.95, 3)
    total = sum(math.exp(log_prob(np.array(g, float), p)) for g in itertools.product([0, 1], repeat=3))
    assert abs(total - 1.0) <= 1e-12


def test_log_prob_tensor_gradient_is_score():
    p = Tensor(np.array([0.3, 0.8, 0.6]), requires_grad=True)
    g = np.array([1.0, 0.0, 1.0])
    T.backward(log_prob(g, p))
    np.testing.assert_allclose(p.grad, score(g, p.data), rtol=1e-12)


def test_reinforce_single_gate_example():
    grad = reinforce_grad(2.0, np.array([1.0]), np.array([0.6]), lambda up: {"p": up})
    assert grad["p"][0] == pytest.approx(10 / 3, abs=1e-12)
    zero = reinforce_grad(0.0, np.array([1.0, 0.0]), np.array([0.6, 0.2]), lambda up: {"p": up})
    np.testing.assert_array_equal(zero["p"], 0.0)


def test_reinforce_grad_chains_through_controller():
    psi = ControllerParams.init(3, hidden=5, rng=np.random.default_rng(0))
    p, vjp = controller_vjp(psi, 0.4)
    g = np.array([1.0, 0.0, 1.0])
    got = reinforce_grad(1.7, g, p, vjp)
    out = log_prob(g, controller_forward(psi, 0.4))
    T.backward(T.scalar_mul(out, 1.7))
    for k, t in psi.parameters().items():
        np.testing.assert_allclose(got[k], t.grad, rtol=1e-10, atol=1e-14)


def test_sample_concrete_examples():
    for t in (0.1, 1.0, 5.0):
        assert sample_concrete(np.array([0.5]), t, noise=np.array([0.0]))[0] == 0.5
    with pytest.raises(ValueError):
        sample_concrete(np.array([0.5]), -0.1)


def test_concrete_hard_limit_frequency():
    rng = np.random.default_rng(0)
    assert abs(sample_concrete(np.full(100_000, 0.3), 0.0, rng).mean() - 0.3) < 0.005


@pytest.mark.parametrize("t", [0.1, 0.5, 2.0])
def test_concrete_threshold_invariant(t):
    rng = np.random.default_rng(1)
    assert abs((sample_concrete(np.full(100_000, 0.7), t, rng) > 0.5).mean() - 0.7) < 0.005


def test_concrete_tensor_path_matches_numpy():
    noise = np.random.default_rng(0).logistic(size=4)
    p = np.array([0.2, 0.4, 0.6, 0.9])
    a = sample_concrete(Tensor(p), 0.3, noise=noise).data
    b = sample_concrete(p, 0.3, noise=noise)
    np.testing.assert_allclose(a, b, rtol=1e-13)


def test_concrete_gradcheck_at_half_temperature():
    noise = np.random.default_rng(3).logistic(size=5)
    err = T.finite_diff_check(lambda z: sample_concrete(T.sigmoid(z), 0.5, noise=noise),
                              [np.random.default_rng(4).standard_normal(5)])
    assert err < 1e-4


def test_test_time_gate_examples():
    np.testing.assert_array_equal(hard_gate([0.9, 0.1]), [1, 0])
    np.testing.assert_array_equal(hard_gate(np.full(4, 0.99)), np.ones(4))
    np.testing.assert_array_equal(hard_gate([0.5]), [0])


def test_split_by_module():
    parts = split_by_module(np.arange(5.0), [2, 3])
    np.testing.assert_array_equal(parts[1], [2, 3, 4])
    with pytest.raises(ValueError):
        split_by_module(np.arange(5.0), [2, 2])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_learned_plan_respects_min_active(seed):
    class Net:
        modules = [type("M", (), {"min_active": 1, "n_components": 3})(),
                   type("M", (), {"min_active": 0, "n_components": 2})()]
        module_sizes = [3, 2]
        module_weights = [np.ones(3), np.ones(2)]

    psi = ControllerParams.init(5, rng=np.random.default_rng(seed))
    psi.b2 = Tensor(np.full(5, -50.0), requires_grad=True)  # every p near 1 - alpha
    plan = learned_plan(Net(), psi, 0.5)
    assert int(plan[0].active.sum()) == 1 and int(plan[1].active.sum()) == 0
    assert all(isinstance(g, GateVector) for g in plan)
