import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import sim_dataset
from oracles import wls_direct
from resweight.balance import Provenance, WeightSet, solve_entropy
from resweight.data import Dataset, EstimandSpec, Target
from resweight.diagnostics import (
    diagnose,
    effect_summary,
    group_quantiles,
    smd,
    tail_ratio,
    weight_quantiles,
    weighted_r2,
)
from resweight.propensity import fit_glm, ipw_weights


def test_smd_zero_for_mirrored_groups():
    x = np.array([[1.0, 5], [2, 3], [3, 1]])
    d = Dataset(np.zeros(6), [1, 1, 1, 0, 0, 0], np.vstack([x, x]))
    np.testing.assert_allclose(smd(d), 0.0, atol=1e-15)


def test_smd_entropy_exact(sim):
    assert np.max(np.abs(smd(sim, solve_entropy(sim)))) <= 1e-8


def test_smd_ipw_matches_direct():
    d = sim_dataset(5)
    w = ipw_weights(fit_glm(d), d)
    got = smd(d, w)
    t, c = d.treated, ~d.treated
    ref = np.empty(d.p)
    for j in range(d.p):
        diff = np.average(d.x[t, j], weights=w.w[t]) - np.average(d.x[c, j], weights=w.w[c])
        ref[j] = diff / np.sqrt((np.var(d.x[t, j], ddof=1) + np.var(d.x[c, j], ddof=1)) / 2)
    np.testing.assert_allclose(got, ref, rtol=1e-12)
    assert 1e-3 < np.max(np.abs(got)) < 0.5


def test_smd_constant_column_warns():
    x = np.column_stack([np.arange(6.0), np.ones(6)])
    d = Dataset(np.zeros(6), [1, 0] * 3, x, ("a", "const"))
    with pytest.warns(RuntimeWarning, match="const"):
        out = smd(d)
    assert np.isnan(out[1]) and np.isfinite(out[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50), st.floats(-100, 100))
def test_smd_affine_invariance(seed, a, b):
    rng = np.random.default_rng(seed)
    n = 40
    x = rng.normal(size=(n, 3))
    z = np.array([1, 0] * (n // 2))
    w = WeightSet(rng.uniform(0.2, 3, n), Provenance.EXTERNAL, normalized=False)
    s1 = smd(Dataset(np.zeros(n), z, x), w)
    s2 = smd(Dataset(np.zeros(n), z, a * x + b), w)
    np.testing.assert_allclose(s1, s2, rtol=1e-7, atol=1e-9)


def test_r2_linear_response(sim):
    y = 1 + sim.x @ np.arange(1.0, 7.0)
    r2, _ = weighted_r2(sim.with_outcome(y), None, "Y")
    assert r2 == pytest.approx(1.0, abs=1e-12)


@pytest.mark.parametrize("target", [Target.ATE, Target.ATT])
def test_r2_z_zero_under_entropy(sim, target):
    w = solve_entropy(sim, EstimandSpec(target))
    r2, partial = weighted_r2(sim, w, "Z")
    assert abs(r2) <= 1e-8
    assert np.max(np.abs(partial)) <= 1e-8


def test_r2_noise_response():
    d = sim_dataset(8, n=20_000)
    y = np.random.default_rng(1).normal(size=d.n)
    r2, partial = weighted_r2(d.with_outcome(y), None, "Y")
    # independent oracle for the full-model R^2
    xd = np.column_stack([np.ones(d.n), d.x])
    e = y - xd @ wls_direct(xd, y, np.ones(d.n))
    assert r2 == pytest.approx(1 - e @ e / np.sum((y - y.mean()) ** 2), abs=1e-10)
    assert r2 < 2e-3
    assert np.max(partial) < 1e-3


def test_quantile_examples():
    np.testing.assert_allclose(list(weight_quantiles(np.full(7, 0.2)).values()), 1.0)
    q = weight_quantiles(np.array([1.0, 3.0]))
    assert q[0.0] == pytest.approx(0.5) and q[1.0] == pytest.approx(1.5)


def test_design3_att_quantiles():
    d = sim_dataset(21, n=20_000, design="D3")
    w = ipw_weights(fit_glm(d), d, EstimandSpec(Target.ATT))
    q = group_quantiles(w, d)
    assert q["treated"][0.5] == pytest.approx(1.0)
    ctrl = d.z == 0
    assert tail_ratio(w.w[ctrl]) >= 5


def test_diagnose_report(sim, tmp_path):
    rep = diagnose(sim, solve_entropy(sim))
    rows = rep.rows()
    assert [r["covariate"] for r in rows] == list(sim.covariate_names)
    rep.to_csv(tmp_path / "d.csv")
    head = (tmp_path / "d.csv").read_text().splitlines()[0]
    assert head == "covariate,initial_imbalance,post_weighting_imbalance,partial_r2_y,partial_r2_z"


def test_effect_summary(sim):
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        row = effect_summary(sim, solve_entropy(sim))
    assert row["tau_wdim"] == pytest.approx(row["tau_wdim_res"], abs=1e-8)
    assert row["pct_improvement"] == pytest.approx(100 * (1 - row["res_sep_se"] / row["neyman_se"]))
    assert row["superpop_se"] >= row["res_sep_se"]
