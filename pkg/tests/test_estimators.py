import json
import warnings
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from netrdd.boundary import build_boundary
from netrdd.estimators import (
    CSV_COLUMNS,
    Z95,
    Dataset,
    EffectRequest,
    EstimationError,
    bias_correct,
    estimate,
    estimate_boundary_direct_subset,
    estimate_boundary_effect,
    estimate_overall_direct,
    estimate_overall_indirect,
    estimates_to_csv,
    nearest_neighbor_score,
)
from netrdd.exposure import FRACTION_TREATED, ONE_TREATED
from netrdd.graph import InterferenceSets, interference_from_clusters
from netrdd.kernel_fit import local_poly_fit
from netrdd.simulate import DgpConfig, generate


@pytest.fixture(scope="module")
def dgp():
    return generate(DgpConfig(n=3000, seed=7)).dataset()


def test_nearest_neighbor_score():
    sets = InterferenceSets.from_lists([[1, 2], [0], [0], []])
    x = np.array([0.5, -0.2, 3.1, 1.0])
    out = nearest_neighbor_score(x, sets, 0.0)
    assert out[0] == -0.2 and out[1] == 0.5 and out[2] == 0.5 and np.isnan(out[3])


def test_request_validation():
    with pytest.raises(EstimationError):
        EffectRequest("bogus")
    with pytest.raises(EstimationError):
        EffectRequest.overall_direct(p=0)
    with pytest.raises(EstimationError):
        EffectRequest.overall_direct(variance_modes=("hc3",))
    with pytest.raises(EstimationError):
        EffectRequest("boundary", source=(1, 0))
    with pytest.warns(UserWarning):
        EffectRequest.overall_direct(h=1.0, b=0.5)
    assert EffectRequest.overall_direct(variance_modes=("iid_hc0",)).variance_modes == ("iid",)
    assert EffectRequest.boundary((1, 0), (0, 0)).name == "tau_10|00"
    assert EffectRequest.direct_subset("1/2").g == Fraction(1, 2)


def test_report_shape(dgp):
    est = estimate(dgp, EffectRequest.boundary((0, 1), (0, 0), bias_correct=True,
                                               variance_modes=("network", "iid", "cluster")))
    for mode in ("network", "iid", "cluster"):
        lo, hi = est.ci95[mode]
        assert lo == pytest.approx(est.tau - Z95 * est.se[mode], rel=1e-14)
        assert hi == pytest.approx(est.tau + Z95 * est.se[mode], rel=1e-14)
        lo, hi = est.ci95_bc[mode]
        assert lo == pytest.approx(est.tau_bc - Z95 * est.se_bc[mode], rel=1e-14)
        assert est.se[mode] > 0 and 0 <= est.pvalue[mode] <= 1
    assert est.n_plus + est.n_minus <= dgp.n
    assert est.s_bar == build_boundary(ONE_TREATED, 2, (0, 1), (0, 0)).min_codim
    assert est.b_used >= est.h_used
    rows = est.csv_rows()
    assert [r["type"] for r in rows] == ["conventional", "robust"]
    assert set(rows[0]) == set(CSV_COLUMNS)
    back = json.loads(est.to_json())
    assert back["label"] == "tau_01|00" and back["tau_bc"] == est.tau_bc


def test_overall_effects_have_codim_one(dgp):
    assert estimate_overall_direct(dgp).s_bar == 1
    assert estimate_overall_indirect(dgp).s_bar == 1


def test_subset_equals_distance_estimator(dgp):
    for g in (0, 1):
        for kw in ({}, {"bias_correct": True}, {"h": 0.7, "bias_correct": True, "b": 1.0}):
            a = estimate_boundary_effect(dgp, EffectRequest.boundary((1, g), (0, g), **kw))
            b = estimate_boundary_direct_subset(dgp, g, EffectRequest.direct_subset(g, **kw))
            assert a.tau == b.tau
            assert a.tau_bc == b.tau_bc
            assert a.se == b.se
            assert (a.n_plus, a.n_minus, a.h_used) == (b.n_plus, b.n_minus, b.h_used)


def _shifted(data, c):
    return Dataset(data.x, data.y + c, data.sets, data.cutoff, data.mapping, clusters=data.clusters)


@pytest.mark.parametrize("req", [EffectRequest.overall_direct(h=0.6, bias_correct=True, b=0.9),
                                 EffectRequest.boundary((1, 0), (0, 0), h=0.7, bias_correct=True, b=1.0),
                                 EffectRequest.overall_indirect(h=0.8)])
def test_shift_equivariance(dgp, req):
    a = estimate(dgp, req)
    b = estimate(_shifted(dgp, 12.5), req)
    assert b.tau == pytest.approx(a.tau, rel=1e-10, abs=1e-10)
    for m in a.se:
        assert b.se[m] == pytest.approx(a.se[m], rel=1e-9)
    if a.tau_bc is not None:
        assert b.tau_bc == pytest.approx(a.tau_bc, rel=1e-10, abs=1e-10)


def test_shift_equivariance_with_selected_bandwidth(dgp):
    req = EffectRequest.boundary((0, 1), (0, 0), bias_correct=True)
    a, b = estimate(dgp, req), estimate(_shifted(dgp, -3.0), req)
    assert b.h_used == pytest.approx(a.h_used, rel=1e-9)
    assert b.tau_bc == pytest.approx(a.tau_bc, rel=1e-8, abs=1e-10)


def test_reorder_invariance(dgp):
    perm = np.random.default_rng(0).permutation(dgp.n)
    inv = np.argsort(perm)
    lists = dgp.sets.as_lists()
    sets = InterferenceSets.from_lists([sorted(int(inv[j]) for j in lists[i]) for i in perm])
    shuffled = Dataset(dgp.x[perm], dgp.y[perm], sets, 0.0, ONE_TREATED, clusters=dgp.clusters[perm])
    for req in (EffectRequest.overall_direct(bias_correct=True), EffectRequest.boundary((0, 1), (0, 0))):
        a, b = estimate(dgp, req), estimate(shuffled, req)
        assert b.tau == pytest.approx(a.tau, rel=1e-10)
        assert b.se["network"] == pytest.approx(a.se["network"], rel=1e-9)
        assert b.h_used == pytest.approx(a.h_used, rel=1e-9)


def test_pct_unique_disjoint_pairs_and_ties():
    rng = np.random.default_rng(1)
    n = 2000
    labels = np.repeat(np.arange(n // 2), 2)
    x = rng.normal(size=n)
    y = x + rng.normal(size=n) + (x >= 0)
    pairs = Dataset(x, y, interference_from_clusters(labels), clusters=labels)
    assert estimate(pairs, EffectRequest.boundary((0, 1), (0, 0))).pct_unique_distance == 1.0


def test_pct_unique_cluster3(dgp):
    assert estimate(dgp, EffectRequest.boundary((0, 1), (0, 0))).pct_unique_distance < 1
    assert estimate(dgp, EffectRequest.overall_direct()).pct_unique_distance == 1.0


def _sided(n, seed, f_plus, f_minus, noise=0.0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1, 1, n)
    xt = np.abs(x)
    y = np.where(x >= 0, f_plus(xt), f_minus(xt)) + noise * rng.normal(size=n)
    return y, xt, x >= 0, x < 0


def test_linear_outcome_has_zero_bias_correction():
    y, xt, plus, minus = _sided(1000, 2, lambda d: 2 + 3 * d, lambda d: 1 - d)
    fp, fm = local_poly_fit(y, xt, plus, 0.5), local_poly_fit(y, xt, minus, 0.5)
    bc = bias_correct(fp, fm, y, xt, plus, minus, 0.8)
    assert abs(bc.bias_plus) < 1e-8 and abs(bc.bias_minus) < 1e-8
    assert bc.tau_bc == pytest.approx(fp.intercept - fm.intercept, abs=1e-8)


def test_quadratic_outcome_bias_removed_exactly():
    y, xt, plus, minus = _sided(5000, 3, lambda d: 2 + d + 4 * d ** 2, lambda d: 1 - d - 2 * d ** 2)
    h, b = 0.4, 0.7
    fp, fm = local_poly_fit(y, xt, plus, h), local_poly_fit(y, xt, minus, h)
    tau = fp.intercept - fm.intercept
    # sample bias constant: h² (m₊ e₁'Γ₊⁻¹θ₊ − m₋ e₁'Γ₋⁻¹θ₋)
    expected_bias = h ** 2 * (4 * fp.bias_factor(2) - (-2) * fm.bias_factor(2))
    assert tau - 1.0 == pytest.approx(expected_bias, rel=1e-8)
    assert abs(expected_bias) > 0.01
    bc = bias_correct(fp, fm, y, xt, plus, minus, b)
    assert bc.tau_bc == pytest.approx(1.0, abs=1e-10)


def test_null_effect_mean_zero():
    taus = []
    for r in range(200):
        rng = np.random.default_rng(1000 + r)
        n = 600
        x = rng.uniform(-1, 1, n)
        labels = np.repeat(np.arange(n // 3), 3)
        y = 0.5 * x + x ** 2 + rng.normal(size=n)
        data = Dataset(x, y, interference_from_clusters(labels), clusters=labels)
        taus.append(estimate(data, EffectRequest.overall_direct(h=0.5)).tau)
    taus = np.array(taus)
    assert abs(taus.mean()) <= 3 * taus.std(ddof=1) / np.sqrt(taus.size)


def test_null_spillover_indirect_mean_zero():
    taus = []
    for r in range(60):
        data = generate(DgpConfig(n=3000, seed=500 + r, spillover=0.0)).dataset()
        taus.append(estimate_overall_indirect(data, EffectRequest.overall_indirect(h=0.6)).tau)
    taus = np.array(taus)
    assert abs(taus.mean()) <= 3 * taus.std(ddof=1) / np.sqrt(taus.size)


def test_empty_side_error():
    sets = interference_from_clusters(np.repeat(np.arange(50), 2))
    x = np.abs(np.random.default_rng(0).normal(size=100))
    data = Dataset(x, x, sets)
    with pytest.raises(EstimationError, match="one side"):
        estimate(data, EffectRequest.overall_direct(h=1.0))


def test_isolated_units_opt_in():
    rng = np.random.default_rng(4)
    labels = np.concatenate([np.repeat(np.arange(300), 2), np.arange(300, 600)])
    x = rng.normal(size=labels.size)
    y = x + (x >= 0) + rng.normal(size=labels.size)
    data = Dataset(x, y, interference_from_clusters(labels), clusters=labels)
    a = estimate(data, EffectRequest.overall_direct(h=1.0))
    b = estimate(data, EffectRequest.overall_direct(h=1.0, include_isolated=True))
    assert a.n_plus + a.n_minus < b.n_plus + b.n_minus


def test_max_neighbors_and_pooling_caveat():
    rng = np.random.default_rng(6)
    sizes = rng.integers(1, 8, 900)
    labels = np.repeat(np.arange(sizes.size), sizes)
    n = labels.size
    x = rng.normal(size=n)
    y = x + rng.normal(size=n)
    data = Dataset(x, y, interference_from_clusters(labels), mapping=FRACTION_TREATED, clusters=labels)
    small = data.restrict_max_neighbors(4)
    assert small.eligible.sum() < n
    assert (data.sets.sizes[small.eligible] <= 4).all()
    est = estimate(small, EffectRequest.boundary((1, 0), (0, 0), h=1.5))
    assert any("pooled" in c for c in est.caveats)


def test_mixed_codimension_caveat():
    rng = np.random.default_rng(7)
    labels = np.concatenate([np.repeat(np.arange(400), 2), np.repeat(np.arange(400, 700), 3)])
    n = labels.size
    x = rng.normal(size=n)
    y = x + rng.normal(size=n)
    data = Dataset(x, y, interference_from_clusters(labels), mapping=FRACTION_TREATED, clusters=labels)
    # all-treated vs none-treated neighbours: codim 1 with one neighbour, 2 with two
    est = estimate(data, EffectRequest.boundary((0, 1), (0, 0), h=1.5))
    assert est.s_bar == 1
    assert any("codimension" in c for c in est.caveats)


def test_csv_export(dgp):
    ests = [estimate(dgp, EffectRequest.overall_direct(bias_correct=True)),
            estimate(dgp, EffectRequest.boundary((1, 0), (0, 0)))]
    text = estimates_to_csv(ests)
    lines = text.strip().split("\n")
    assert lines[0] == ",".join(CSV_COLUMNS)
    assert len(lines) == 4


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_nonfinite_inputs_rejected(seed):
    x = np.random.default_rng(seed).normal(size=6)
    y = x.copy()
    y[seed % 6] = np.nan
    with pytest.raises(EstimationError):
        Dataset(x, y, interference_from_clusters([0, 0, 1, 1, 2, 2]))


def test_filtered_units_do_not_set_codimension():
    rng = np.random.default_rng(8)
    # pairs (one neighbour, codim 1) are filtered out; triples (codim 2) remain
    labels = np.concatenate([np.repeat(np.arange(400), 2), np.repeat(np.arange(400, 1100), 3)])
    n = labels.size
    x = rng.normal(size=n)
    y = x + rng.normal(size=n)
    data = Dataset(x, y, interference_from_clusters(labels), mapping=FRACTION_TREATED, clusters=labels)
    data.eligible = data.sets.sizes == 2
    est = estimate(data, EffectRequest.boundary((0, 1), (0, 0), h=1.5))
    assert est.s_bar == 2
    assert not any("codimension" in c for c in est.caveats)
