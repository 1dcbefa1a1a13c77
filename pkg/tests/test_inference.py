import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy.stats import chi2

from clusteriv.centering import build_astar_leaveout
from clusteriv.errors import DegenerateDenominator
from clusteriv.estimator import ClusteredDataset, estimate
from clusteriv.exclusion import ClusterPartition, from_weak_exogeneity, strict_exogeneity
from clusteriv.inference import (
    ConfidenceSet,
    JackknifeOperator,
    ar_curve,
    ar_quadratic,
    ar_test,
    cluster_robust_variance,
    infer,
    invert_ar,
    jackknife_variance,
    numerator_stat,
    tstat_interval,
)

from conftest import panel, random_instance


def panel_data(N=30, T=4, beta=0.5, seed=0):
    part, time, W = panel(N, T)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(N * T) + np.repeat(rng.standard_normal(N), T)
    y = beta * x + rng.standard_normal(N * T) + np.repeat(rng.standard_normal(N), T)
    data = ClusteredDataset.from_arrays(y, x, W, part, time)
    return data, build_astar_leaveout(W, from_weak_exogeneity(part, time))


def random_data(seed):
    W, e, rng = random_instance(seed)
    n = W.shape[0]
    x = rng.standard_normal(n)
    y = rng.standard_normal(n) + 0.3 * x
    data = ClusteredDataset.from_arrays(y, x, W, e.partition)
    return data, build_astar_leaveout(W, e), rng


def test_z_zero_at_estimate():
    data, A = panel_data()
    b = estimate(data, A).beta_hat
    assert abs(numerator_stat(data, A, b).z_value) < 1e-10
    t = ar_test(data, A, b)
    assert t.statistic < 1e-20 and not t.reject


def test_single_cluster():
    part, time, W = panel(1, 4)
    rng = np.random.default_rng(0)
    data = ClusteredDataset.from_arrays(rng.standard_normal(4), rng.standard_normal(4),
                                        W, part, time)
    A = build_astar_leaveout(W, from_weak_exogeneity(part, time))
    s = numerator_stat(data, A, 0.3)
    assert s.per_cluster_deltas[0] == pytest.approx(s.z_value)
    assert jackknife_variance(s) == pytest.approx(s.z_value**2)


def test_block_diagonal_deltas_are_own_quadratic_forms():
    data, A = panel_data(N=2, T=3)
    s = numerator_stat(data, A, 0.1)
    U = data.y - 0.1 * data.x
    Ad = A.dense()
    own = [data.x[g] @ Ad[np.ix_(g, g)] @ U[g] for g in data.partition.groups()]
    assert np.allclose(s.per_cluster_deltas, own)
    assert s.per_cluster_deltas.sum() == pytest.approx(s.z_value)
    assert cluster_robust_variance(s) == pytest.approx(jackknife_variance(s), rel=1e-12)


def test_zero_residual_gives_zero_variances():
    data, A = panel_data()
    d = data.with_outcome(0.7 * data.x)
    s = numerator_stat(d, A, 0.7)
    assert cluster_robust_variance(s) == pytest.approx(0.0, abs=1e-20)
    assert jackknife_variance(s) == pytest.approx(0.0, abs=1e-20)
    # V = 0 and Z = 0 gives AR = 0
    assert ar_test(d, A, 0.7).statistic == 0.0


def test_zero_variance_conventions():
    from clusteriv.inference import _ar_ratio

    assert _ar_ratio(2.0, 0.0) == math.inf
    assert _ar_ratio(0.0, 0.0) == 0.0
    # Z = 0 at a null that fits every cluster exactly
    part = ClusterPartition.from_labels([0, 0, 1, 1])
    data = ClusteredDataset.from_arrays([2.0, 0.0, 4.0, 0.0], [1.0, 0.0, 2.0, 0.0], None, part)
    A = np.diag([1.0, 0.0, 1.0, 0.0])
    t = ar_test(data, A, 2.0)
    assert t.variance == 0.0 and t.statistic == 0.0 and not t.reject


@given(st.integers(0, 10**6))
def test_expansion_matches_zeroing(seed):
    data, A, rng = random_data(seed)
    b0 = float(rng.standard_normal())
    a = numerator_stat(data, A, b0, method="expansion")
    z = numerator_stat(data, A, b0, method="zeroing")
    scale = max(1.0, np.abs(z.per_cluster_deltas).max())
    assert np.abs(a.per_cluster_deltas - z.per_cluster_deltas).max() <= 1e-10 * scale


def test_expansion_matches_zeroing_two_way_fe():
    from clusteriv.simulation import DgpSpec, generate

    spec = DgpSpec("two_way_fe", {"N": 30, "T": 3, "teachers_per_period": 2}, seed=1)
    data, _ = generate(spec)
    A = build_astar_leaveout(data.W, from_weak_exogeneity(data.partition, data.time))
    op = JackknifeOperator(A, data.partition)
    assert not op.block_diagonal
    a = numerator_stat(data, A, 0.2, op=op)
    z = numerator_stat(data, A, 0.2, method="zeroing", op=op)
    assert np.allclose(a.per_cluster_deltas, z.per_cluster_deltas, atol=1e-10)
    assert jackknife_variance(a) != pytest.approx(cluster_robust_variance(a), rel=1e-6)


def test_unknown_delta_method():
    data, A = panel_data(N=3)
    with pytest.raises(ValueError):
        numerator_stat(data, A, 0.0, method="bogus")


@given(st.integers(0, 10**6), st.floats(0.1, 10.0))
def test_ar_scaling_invariance(seed, c):
    data, A, rng = random_data(seed)
    b0 = float(rng.standard_normal())
    base = ar_test(data, A, b0).statistic
    scaled = ClusteredDataset.from_arrays(c * data.y, c * data.x, data.W, data.partition)
    s = ar_test(scaled, A, b0).statistic
    if math.isfinite(base):
        assert s == pytest.approx(base, rel=1e-7, abs=1e-12)


@given(st.integers(0, 10**6), st.sampled_from([0.01, 0.05, 0.1, 0.3]))
def test_ar_duality_and_containment(seed, alpha):
    data, A, rng = random_data(seed)
    try:
        cs = invert_ar(data, A, alpha)
    except DegenerateDenominator:
        return
    try:
        bhat = estimate(data, A).beta_hat
        assert cs.contains(bhat)
    except DegenerateDenominator:
        pass
    probes = list(rng.standard_normal(30) * 3)
    probes += [e for e in cs.endpoints if math.isfinite(e)]
    q = chi2.ppf(1 - alpha, 1)
    for b0 in probes:
        t = ar_test(data, A, b0, alpha)
        if abs(t.statistic - q) <= 1e-6 * q:
            continue  # boundary ties
        assert t.reject == (not cs.contains(b0, rtol=0.0))


def test_strong_id_bounded_interval_and_t_comparison():
    data, A = panel_data(N=500, T=5, seed=3)
    cs = invert_ar(data, A)
    assert cs.kind == "bounded_interval"
    bhat = estimate(data, A).beta_hat
    assert cs.contains(bhat)
    t = tstat_interval(data, A)
    assert (t.endpoints[0] + t.endpoints[1]) / 2 == pytest.approx(bhat)
    width = cs.endpoints[1] - cs.endpoints[0]
    for lo_hi in range(2):
        assert abs(t.endpoints[lo_hi] - cs.endpoints[lo_hi]) <= 0.1 * width
    zero = tstat_interval(data, A, alpha=1.0)
    assert zero.endpoints == (bhat, bhat)


def test_zero_denominator_gives_unbounded_set():
    # x'Ax = 0 while the per-cluster x-deltas are (1, -1)
    part = ClusterPartition.from_labels([0, 0, 1, 1])
    A = np.diag([1.0, 0.0, -1.0, 0.0])
    x = np.array([1.0, 0.0, 1.0, 0.0])
    y = np.array([1.0, 0.0, 2.0, 0.0])
    data = ClusteredDataset.from_arrays(y, x, None, part)
    Pa, Pb, Pc, _, _ = ar_quadratic(data, A)
    q = chi2.ppf(0.95, 1)
    assert Pa == pytest.approx(-2 * q)
    cs = invert_ar(data, A)
    assert cs.kind in ("complement_of_interval", "whole_line")
    for b0 in np.linspace(-5, 5, 41):
        assert ar_test(data, A, b0).reject == (not cs.contains(b0, rtol=0.0))


def test_confidence_set_kinds():
    cs = ConfidenceSet("complement_of_interval", (-1.0, 1.0), 0.95)
    assert cs.contains(-2) and cs.contains(2) and not cs.contains(0)
    half = ConfidenceSet("complement_of_interval", (-math.inf, 3.0), 0.95)
    assert half.contains(5.0) and not half.contains(0.0)
    assert ConfidenceSet("whole_line", (), 0.95).contains(1e9)
    assert ConfidenceSet("bounded_interval", (0.0, 1.0), 0.9).to_dict() == {
        "kind": "bounded_interval", "endpoints": [0.0, 1.0], "level": 0.9}


def test_ar_curve_consistent_with_test():
    data, A = panel_data(N=40)
    grid, stats = ar_curve(data, A, points=21)
    assert grid.size == 21
    for g, s in zip(grid[::5], stats[::5]):
        assert s == pytest.approx(ar_test(data, A, g).statistic, rel=1e-9, abs=1e-12)
    assert stats[10] == pytest.approx(0.0, abs=1e-12)


def test_infer_report_json():
    data, A = panel_data(N=40)
    rep = infer(data, A)
    d = json.loads(rep.to_json())
    assert set(d) >= {"beta_hat", "trace_A", "V_jk", "V_cr", "ar_set", "t_interval",
                      "diagnostics"}
    assert d["V_jk"] == pytest.approx(d["V_cr"])
    assert d["ar_set"]["kind"] == "bounded_interval"
    half = ConfidenceSet("complement_of_interval", (-math.inf, 1.0), 0.95)
    from clusteriv.inference import _jsonable
    assert _jsonable(half.to_dict())["endpoints"] == ["-inf", 1.0]


def test_strict_exogeneity_block_diagonal_operator():
    part = ClusterPartition.from_labels(np.repeat(np.arange(4), 3))
    W = np.eye(4)[part.assignment]
    A = build_astar_leaveout(W, strict_exogeneity(part))
    assert JackknifeOperator(A, part).block_diagonal
