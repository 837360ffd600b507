"""Acceptance checks, one test per criterion.

Each test records a PASS/FAIL line through ``record_criterion``; the lines
are printed inline and again in the terminal summary. Tolerances are the
ones the criteria state; none are tuned to the results.
"""

import json
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from conftest import record_criterion, sim_dataset
from oracles import entropy_lambda_1d, entropy_primal, probit_mle_1d, two_group_hc0
from resweight.balance import Provenance, WeightSet, check_balance, solve_entropy, solve_group
from resweight.data import Dataset, EstimandSpec, Target
from resweight.diagnostics import smd, weighted_r2
from resweight.inference import estimate
from resweight.montecarlo import SimulationConfig, run_study
from resweight.propensity import fit_glm

NOMINAL = 0.95
R = 2000
N = 300
WORKERS = min(8, os.cpu_count() or 1)
BAND_HALF = 2 * np.sqrt(NOMINAL * (1 - NOMINAL) / R)  # ~0.00975 at R=2000

pytestmark = pytest.mark.slow


@pytest.fixture(scope="module")
def draws():
    return [sim_dataset(1000 + k, n=N) for k in range(50)]


@pytest.fixture(scope="module")
def entropy_fits(draws):
    out = {}
    for tg in (Target.ATE, Target.ATT):
        spec = EstimandSpec(tg)
        out[tg] = [solve_entropy(d, spec, tol=1e-8) for d in draws]
    return out


_CELLS = {}


def cell(**kw):
    key = tuple(sorted(kw.items()))
    if key not in _CELLS:
        cfg = SimulationConfig(n=N, replications=R, **kw)
        t0 = time.perf_counter()
        rep = run_study(cfg, workers=WORKERS)
        _CELLS[key] = (rep, time.perf_counter() - t0)
    return _CELLS[key]


def test_c1_exact_balance(draws):
    t0 = time.perf_counter()
    worst = 0.0
    for tg in (Target.ATE, Target.ATT):
        spec = EstimandSpec(tg)
        for d in draws:
            w = solve_entropy(d, spec, tol=1e-8)
            worst = max(worst, max(np.max(np.abs(v)) for v in check_balance(d, w, spec).values()))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 5.0
    record_criterion(1, ok, f"max |imbalance| {worst:.2e} (<= 1e-8), {elapsed:.2f}s for 100 solves (< 5s)")
    assert ok


def test_c2_fwl_invariance(draws, entropy_fits):
    gap = 0.0
    for tg, ws in entropy_fits.items():
        spec = EstimandSpec(tg)
        for d, w in zip(draws, ws):
            gap = max(gap, abs(estimate(d, w, "neyman", spec).tau_hat
                               - estimate(d, w, "separate", spec).tau_hat))
    ok = gap <= 1e-6
    record_criterion(2, ok, f"max |tau_Neyman - tau_Separate| {gap:.2e} (<= 1e-6)")
    assert ok


def test_c3_sandwich_oracles(draws, entropy_fits):
    gap_sep = 0.0
    for tg, ws in entropy_fits.items():
        spec = EstimandSpec(tg)
        for d, w in zip(draws, ws):
            fit = estimate(d, w, "separate", spec)
            direct = np.sum(w.w**2 * fit.residuals**2)
            gap_sep = max(gap_sep, abs(fit.var_hc0 - direct))
    gap_ney = 0.0
    for d in draws:
        uni = WeightSet(np.where(d.treated, 1 / d.n_t, 1 / d.n_c), Provenance.EXTERNAL)
        _, var = two_group_hc0(d.y, d.z)
        gap_ney = max(gap_ney, abs(estimate(d, uni, "neyman").var_hc0 - var))
    ok = gap_sep <= 1e-10 and gap_ney <= 1e-12
    record_criterion(3, ok, f"separate vs direct form {gap_sep:.1e} (<= 1e-10); "
                            f"unweighted Neyman vs closed form {gap_ney:.1e} (<= 1e-12)")
    assert ok


def test_c4_coverage_homogeneous():
    rep, elapsed = cell(framework="model", design="D1", outcome="O1", effects="homogeneous")
    sep, ney = rep.row("separate"), rep.row("neyman")
    lo, hi = NOMINAL - BAND_HALF, NOMINAL + BAND_HALF
    sep_ok = lo <= sep["bias_adj_coverage"] <= hi
    ney_ok = ney["coverage"] >= 0.97
    # runtime target is stated for 8 workers; this box may have fewer
    time_ok = elapsed < 120
    ok = sep_ok and ney_ok and time_ok
    record_criterion(
        4, ok,
        f"Separate bias-adj coverage {sep['bias_adj_coverage']:.4f} in [{lo:.4f}, {hi:.4f}]: "
        f"{'yes' if sep_ok else 'no'}; Neyman coverage {ney['coverage']:.4f} (>= 0.97); "
        f"{elapsed:.1f}s with {WORKERS} worker(s)",
    )
    assert sep_ok, "Separate bias-adjusted coverage outside the nominal band"
    assert ney_ok and time_ok


def test_c5_precision_gain():
    parts, ok = [], True
    for eff in ("homogeneous", "heterogeneous"):
        rep, _ = cell(framework="model", design="D1", outcome="O1", effects=eff)
        sep, ney = rep.row("separate"), rep.row("neyman")
        ratio = sep["se_ratio"]
        gain = ney["mean_se"] / sep["mean_se"]
        ok &= 0.90 <= ratio <= 1.15 and gain >= 1.10
        parts.append(f"{eff}: SE ratio {ratio:.3f} in [0.90, 1.15], Neyman/Separate SE {gain:.3f} (>= 1.10)")
    record_criterion(5, ok, "; ".join(parts))
    assert ok


def test_c6_superpopulation_correction():
    rep, _ = cell(framework="superpop", design="D1", outcome="O1", effects="heterogeneous")
    unc, cor = rep.row("separate"), rep.row("separate+correction")
    p = unc["coverage"]
    below = p <= NOMINAL - 2 * np.sqrt(p * (1 - p) / R)
    within = cor["coverage"] >= NOMINAL - BAND_HALF
    addend_ok = all(r["separate+correction_se"] >= r["separate_se"]
                    for r in rep.records if r["ok"])
    ok = below and within and addend_ok
    record_criterion(
        6, ok,
        f"uncorrected PATE coverage {p:.4f} below nominal by >= 2 MC SE: {'yes' if below else 'no'}; "
        f"corrected {cor['coverage']:.4f} (bias-adj {cor['bias_adj_coverage']:.4f}) "
        f">= {NOMINAL - BAND_HALF:.4f}: {'yes' if within else 'no'}; addend >= 0 in every rep: "
        f"{'yes' if addend_ok else 'no'}",
    )
    assert below and addend_ok
    assert within, "corrected coverage below the nominal band"


def test_c7_ipw_arm():
    parts, cover_ok = [], True
    for design in ("D1", "D2"):
        rep, _ = cell(framework="model", design=design, outcome="O1", effects="homogeneous",
                      weighting="ipw-probit")
        c = rep.row("separate")["coverage"]
        good = c >= NOMINAL - BAND_HALF
        cover_ok &= good
        parts.append(f"{design} Separate coverage {c:.4f} (>= {NOMINAL - BAND_HALF:.4f})")
    rep, _ = cell(framework="model", design="D3", outcome="O1", effects="homogeneous",
                  weighting="ipw-probit")
    row = rep.row("separate")
    tail_ok = row["heavy_tail"] == 1
    parts.append(f"D3 mean max/median {row['mean_tail_ratio']:.1f}, heavy-tail flag {row['heavy_tail']}")
    record_criterion(7, cover_ok and tail_ok, "; ".join(parts))
    assert tail_ok
    assert cover_ok, "IPW Separate coverage below the nominal band in D1/D2"


def test_c8_solver_oracles():
    rng = np.random.default_rng(8)
    lam_gap = 0.0
    for _ in range(20):
        x = np.sort(rng.normal(size=3))
        t = rng.uniform(x[0] + 0.05 * (x[2] - x[0]), x[2] - 0.05 * (x[2] - x[0]))
        lam_gap = max(lam_gap, abs(solve_group(x[:, None], np.array([t])).lam[0]
                                   - entropy_lambda_1d(x, t)))
    lam_gap = max(lam_gap, abs(solve_group(np.array([[0.0], [1], [2]]), np.array([1.5])).lam[0]
                               - entropy_lambda_1d([0, 1, 2], 1.5)))
    probit_gap = 0.0
    for k in range(5):
        x = rng.normal(size=50)
        z = (rng.normal(0.2 * k - 0.4, 1) + (0.5 + 0.3 * k) * x + rng.normal(size=50) > 0).astype(int)
        fit = fit_glm(Dataset(np.zeros(50), z, x[:, None]), "probit")
        probit_gap = max(probit_gap, np.max(np.abs(fit.coef - probit_mle_1d(x, z))))
    w_gap = 0.0
    for k in range(20):
        n, p = (4, 2) if k % 2 else (int(rng.integers(3, 5)), 1)
        phi = rng.normal(size=(n, p))
        target = rng.dirichlet(np.ones(n)) @ phi
        w_gap = max(w_gap, np.max(np.abs(solve_group(phi, target).w - entropy_primal(phi, target))))
    ok = lam_gap <= 1e-8 and probit_gap <= 1e-4 and w_gap <= 1e-6
    record_criterion(8, ok, f"lambda vs bisection {lam_gap:.1e} (<= 1e-8); probit vs grid+golden "
                            f"{probit_gap:.1e} (<= 1e-4); weights vs primal minimizer {w_gap:.1e} (<= 1e-6)")
    assert ok


def test_c9_determinism(tmp_path):
    cfg = tmp_path / "grid.json"
    cfg.write_text(json.dumps({"framework": ["design", "superpop"], "design": "D1",
                               "effects": "heterogeneous", "n": 200, "replications": 48}))

    def run(workers):
        out = subprocess.run([sys.executable, "-m", "resweight", "simulate", "--config", str(cfg),
                              "--seed", "42", "--workers", str(workers)],
                             capture_output=True)
        assert out.returncode == 0, out.stderr.decode()
        return out.stdout

    first = run(1)
    outputs = [first, run(1), run(4), run(8)]
    ok = all(o == first for o in outputs) and len(first) > 0
    record_criterion(9, ok, "simulate stdout identical across two runs and workers {1, 4, 8}: "
                            f"{'yes' if ok else 'no'} ({len(first)} bytes)")
    assert ok


def test_c10_diagnostics(draws, entropy_fits):
    r2 = 0.0
    for tg, ws in entropy_fits.items():
        for d, w in zip(draws, ws):
            r2 = max(r2, abs(weighted_r2(d, w, "Z")[0]))
    rng = np.random.default_rng(10)
    affine = 0.0
    for _ in range(200):
        n = int(rng.integers(10, 60))
        p = int(rng.integers(1, 4))
        x = rng.normal(size=(n, p)) * rng.uniform(0.1, 10, p)
        z = np.zeros(n, dtype=int)
        z[rng.permutation(n)[: n // 2]] = 1
        w = WeightSet(rng.exponential(size=n), Provenance.EXTERNAL, normalized=False)
        a = rng.uniform(0.01, 100, p) * rng.choice([-1, 1], p)
        b = rng.normal(0, 100, p)
        s1 = smd(Dataset(np.zeros(n), z, x), w)
        s2 = smd(Dataset(np.zeros(n), z, x * a + b), w)
        # a negative scale flips the sign of the difference
        affine = max(affine, np.max(np.abs(s2 - np.sign(a) * s1)))
    ok = r2 <= 1e-8 and affine <= 1e-8
    record_criterion(10, ok, f"max R^2(Z~X, w) {r2:.1e} (<= 1e-8); SMD affine invariance gap {affine:.1e}")
    assert ok
