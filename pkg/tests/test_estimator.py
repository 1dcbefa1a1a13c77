import numpy as np
import pytest
from hypothesis import given, strategies as st

from clusteriv.centering import build_astar, build_astar_leaveout
from clusteriv.errors import DegenerateDenominator, NonFiniteValue, NonpositiveQ
from clusteriv.estimator import (
    ClusteredDataset,
    ar1_panel_cross_moments,
    ar1_panel_Q,
    estimate,
    estimate_iv_form,
    estimate_ols,
    nickell_bias_plugin,
)
from clusteriv.exclusion import (
    ClusterPartition,
    contemporaneous_only,
    from_weak_exogeneity,
    strict_exogeneity,
)
from clusteriv.projections import build_projection

from conftest import annihilator, panel, random_instance


def test_exact_linear_relation():
    x = np.array([1.0, -2.0, 0.5, 4.0])
    data = ClusteredDataset.from_arrays(2 * x, x, None, [0, 0, 1, 1])
    A = build_astar(data.W, strict_exogeneity(data.partition))
    assert estimate(data, A).beta_hat == pytest.approx(2.0)
    assert estimate_ols(data).beta_hat == pytest.approx(2.0)


def test_t2_hand_example():
    part, time, W = panel(1, 2)
    data = ClusteredDataset.from_arrays([2.0, 6.0], [1.0, 3.0], W, part, time)
    A = build_astar_leaveout(W, from_weak_exogeneity(part, time))
    assert np.allclose(A @ data.y, [-2.0, 0.0])
    assert np.allclose(A @ data.x, [-1.0, 0.0])
    res = estimate(data, A)
    assert res.beta_hat == pytest.approx(2.0)
    assert res.numerator == pytest.approx(-2.0) and res.denominator == pytest.approx(-1.0)
    assert res.effective_sample == pytest.approx(0.5)


def test_contemporaneous_only_is_degenerate():
    part, time, W = panel(5, 3)
    rng = np.random.default_rng(0)
    data = ClusteredDataset.from_arrays(rng.standard_normal(15), rng.standard_normal(15),
                                        W, part, time)
    A = build_astar_leaveout(W, contemporaneous_only(part))
    with pytest.raises(DegenerateDenominator):
        estimate(data, A)


def test_weak_denominator_flag():
    part, time, W = panel(20, 3)
    rng = np.random.default_rng(1)
    A = build_astar_leaveout(W, from_weak_exogeneity(part, time))
    x = rng.standard_normal(60)
    strong = ClusteredDataset.from_arrays(rng.standard_normal(60), x, W, part, time)
    assert not estimate(strong, A).weak_denominator
    # x nearly constant over time within each unit, plus a large common level
    xw = np.repeat(rng.standard_normal(20), 3) * 10 + 1e-3 * rng.standard_normal(60)
    weak = ClusteredDataset.from_arrays(rng.standard_normal(60), xw, W, part, time)
    assert estimate(weak, A).weak_denominator


def test_dataset_validation():
    with pytest.raises(NonFiniteValue):
        ClusteredDataset.from_arrays([1.0, np.nan], [1.0, 2.0], None, [0, 1])
    with pytest.raises(ValueError):
        ClusteredDataset.from_arrays([1.0], [1.0, 2.0], None, [0, 1])
    with pytest.raises(ValueError):
        ClusteredDataset.from_arrays([1.0, 2.0], [1.0, 2.0], np.ones((3, 1)), [0, 1])


def _random_data(seed):
    W, e, rng = random_instance(seed)
    n = W.shape[0]
    x = rng.standard_normal(n)
    y = 0.7 * x + rng.standard_normal(n)
    return ClusteredDataset.from_arrays(y, x, W, e.partition), e, rng


@given(st.integers(0, 10**6))
def test_ratio_and_invariances(seed):
    data, e, rng = _random_data(seed)
    A = build_astar_leaveout(data.W, e)
    try:
        res = estimate(data, A)
    except DegenerateDenominator:
        return
    assert res.beta_hat * res.denominator == pytest.approx(res.numerator, rel=1e-10, abs=1e-12)
    c = float(rng.uniform(0.1, 10))
    assert estimate(data.with_outcome(c * data.y), A).beta_hat == pytest.approx(
        c * res.beta_hat, rel=1e-8, abs=1e-10)
    gamma = rng.standard_normal(data.W.K) * 5
    shifted = data.with_outcome(data.y + data.W.W @ gamma)
    assert estimate(shifted, A).beta_hat == pytest.approx(res.beta_hat, rel=1e-7, abs=1e-8)
    iv = estimate_iv_form(data, A)
    assert iv.beta_hat == pytest.approx(res.beta_hat, rel=1e-10, abs=1e-12)


def test_iv_form_random_n50():
    rng = np.random.default_rng(5)
    labels = np.repeat(np.arange(10), 5)
    part = ClusterPartition.from_labels(labels)
    W = np.column_stack([np.eye(10)[labels], rng.standard_normal(50)])
    time = np.tile(np.arange(1, 6), 10)
    data = ClusteredDataset.from_arrays(rng.standard_normal(50), rng.standard_normal(50),
                                        W, part, time)
    A = build_astar_leaveout(W, from_weak_exogeneity(part, time))
    assert estimate_iv_form(data, A).beta_hat == pytest.approx(
        estimate(data, A).beta_hat, rel=1e-10)


def test_iv_form_with_M_is_ols():
    rng = np.random.default_rng(2)
    part = ClusterPartition.from_labels(np.repeat([0, 1, 2], 4))
    W = np.column_stack([np.ones(12), rng.standard_normal(12)])
    data = ClusteredDataset.from_arrays(rng.standard_normal(12), rng.standard_normal(12),
                                        W, part)
    A = build_astar_leaveout(W, strict_exogeneity(part))
    assert estimate_iv_form(data, A).beta_hat == pytest.approx(estimate_ols(data).beta_hat,
                                                               rel=1e-10)
    M = annihilator(W)
    ols = (data.x @ M @ data.y) / (data.x @ M @ data.x)
    assert estimate_ols(data).beta_hat == pytest.approx(ols, rel=1e-10)


def test_iv_form_rejects_design_mode():
    part, time, W = panel(4, 3)
    rng = np.random.default_rng(0)
    data = ClusteredDataset.from_arrays(rng.standard_normal(12), rng.standard_normal(12),
                                        W, part, time)
    A = build_astar(W, from_weak_exogeneity(part, time), mode="design")
    with pytest.raises(ValueError):
        estimate_iv_form(data, A)


def test_nickell_plugin_trivial_cases():
    part, time, W = panel(10, 3)
    M = build_projection(W)
    zero = nickell_bias_plugin(M, lambda a, b: np.zeros(np.shape(a)), 1.0)
    assert zero == 0.0
    with pytest.raises(NonpositiveQ):
        nickell_bias_plugin(M, lambda a, b: np.zeros(np.shape(a)), 0.0)
    one = nickell_bias_plugin(M, ar1_panel_cross_moments(part, time, 0.5, 1.0), 2.0, part)
    two = nickell_bias_plugin(M, ar1_panel_cross_moments(part, time, 0.5, 2.0), 2.0, part)
    assert two == pytest.approx(2 * one)


def test_nickell_plugin_matches_dense_double_sum():
    part, time, W = panel(4, 3)
    beta, s2 = 0.5, 1.0
    M = annihilator(W)
    n = M.shape[0]
    E = np.zeros((n, n))
    lab = part.assignment
    for a in range(n):
        for b in range(n):
            if lab[a] == lab[b] and time[a] > time[b]:
                E[a, b] = beta ** (time[a] - 1 - time[b]) * s2
    Q = ar1_panel_Q(build_projection(W), time, beta, s2)
    expected = np.sum(M * E) / n / Q
    got = nickell_bias_plugin(build_projection(W), ar1_panel_cross_moments(part, time, beta, s2),
                              Q, part)
    assert got == pytest.approx(expected, rel=1e-12)
    # T=3 demeaning: M[t, s] = -1/3 off the diagonal, pairs (2,1),(3,2),(3,1)
    num = -(1 + 1 + beta) / 3 / 3
    assert got * Q == pytest.approx(num, rel=1e-12)
    assert got < 0
