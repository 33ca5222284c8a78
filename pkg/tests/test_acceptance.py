"""Numbered acceptance criteria at their stated tolerances.

Each test records a verdict for its criterion; the terminal summary prints one
PASS/FAIL line per criterion. Parts known to be out of reach at the stated
scale are strict xfails, so they fail loudly if they ever start passing.
"""

import numpy as np
import pytest
from scipy.optimize import isotonic_regression

from enumeration import build, corrupt, true_nuisances
from pathdid import (DgpConfig, EstimandSpec, TreatmentPath, estimate_naive_prepost,
                     generate_sample, improved_fit, power_curve, replication_rng,
                     run_monte_carlo, sweep_misspecification, sweep_missingness)
from pathdid.estimators import estimator_terms, reduced_point, robust_point
from pathdid.first_stage import fit_logit, fit_nuisances, fit_ols, logit_loglik
from pathdid.inference import linearize
from test_estimators import FLAT_D2, _random_full_sample, _six_terms
from test_first_stage import _logit_instance, _oracle_logit

TARGETS = ("11", "10", "01")
SEED = 1
REPS = 1000
N = 10_000
N_LARGE = 100_000
POWER_GRID = (-0.3, -0.2, -0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3)


# ---------------------------------------------------------------------------
# shared Monte Carlo runs

@pytest.fixture(scope="module")
def mc_none():
    return run_monte_carlo(DgpConfig.scenario("none", n=N, seed=SEED), REPS,
                           ("R", "DR", "OR", "IPW", "CC-DR", "R-IMPROVED"), with_seb=True)


@pytest.fixture(scope="module")
def mc_m():
    return run_monte_carlo(DgpConfig.scenario("M", n=N, seed=SEED), REPS, ("R", "DR"))


@pytest.fixture(scope="module")
def sweep_c():
    return sweep_missingness([-5.0 + 0.5 * i for i in range(21)],
                             DgpConfig.scenario("M", seed=SEED), N_LARGE)


@pytest.fixture(scope="module")
def sweep_eta():
    return sweep_misspecification([i / 10 for i in range(11)], DgpConfig(seed=SEED), N_LARGE)


@pytest.fixture(scope="module")
def power():
    return power_curve(DgpConfig(n=N, seed=SEED), POWER_GRID, REPS, ("R", "DR"))


def _table_bias(cell):
    # criteria 2 and 3 quote truth minus mean estimate
    return cell.truth - cell.mean_estimate


def _max_abs(rows, method):
    return max(abs(r["bias"]) for r in rows if r["estimator"] == method)


# ---------------------------------------------------------------------------
# 1-4: Monte Carlo tables

def test_criterion_1_no_misspecification(mc_none, verdict):
    bad = []
    for m in ("R", "DR", "OR"):
        for t in TARGETS:
            c = mc_none.cell(m, t)
            if not (abs(c.bias) <= 0.01 and 0.93 <= c.coverage <= 0.97):
                bad.append(f"{m}/{t} bias={c.bias:.4f} cov={c.coverage:.3f}")
    worst = max(abs(mc_none.cell(m, t).bias) for m in ("R", "DR", "OR") for t in TARGETS)
    assert verdict(1, "bias and coverage", not bad, f"max|bias|={worst:.4f} {bad}")


def test_criterion_2_missingness_model_wrong(mc_m, verdict):
    r_bias = {t: _table_bias(mc_m.cell("R", t)) for t in TARGETS}
    dr = mc_m.cell("DR", "01")
    ok_r = all(abs(b) <= 0.012 for b in r_bias.values())
    ok_dr = abs(_table_bias(dr) - 0.036) <= 0.015 and dr.coverage <= 0.93
    detail = (f"R truth-mean {({t: round(b, 4) for t, b in r_bias.items()})}; "
              f"DR 01 truth-mean={_table_bias(dr):.4f} cov={dr.coverage:.3f}")
    assert verdict(2, "R unbiased, DR biased", ok_r and ok_dr, detail)


def test_criterion_3_complete_case_selection_bias(mc_none, verdict):
    b = _table_bias(mc_none.cell("CC-DR", "01"))
    assert verdict(3, "CC-DR 01 bias", abs(b - 0.205) <= 0.02, f"truth-mean={b:.4f}")


def test_criterion_4_variance_near_bound(mc_none, verdict):
    nvar = mc_none.cell("R", "11").n_var
    seb = mc_none.cell("SEB", "11").n_var
    ratio = nvar / seb
    ok = abs(nvar / 49.4 - 1) <= 0.10 and abs(seb / 51.1 - 1) <= 0.10 and 0.9 <= ratio <= 1.15
    assert verdict(4, "n*Var(R) and SEB", ok, f"n*Var={nvar:.2f} SEB={seb:.2f} ratio={ratio:.3f}")


# ---------------------------------------------------------------------------
# 5-6: large-draw sweeps

def test_criterion_5_complete_case_at_half_missing(sweep_c, verdict):
    rows = [r for r in sweep_c if r["estimator"] == "CC-DR" and r["pdatt"] == "11-00"]
    half = min(rows, key=lambda r: abs(r["missing_share"] - 0.5))
    ok = abs(half["bias"]) > 0.05
    assert verdict(5, "CC-DR at half missing", ok,
                   f"c={half['x']} share={half['missing_share']:.3f} bias={half['bias']:.4f}")


@pytest.mark.xfail(strict=True, reason="one n=1e5 draw per point: R sd is 0.02 near c=0 and 0.3 at c=-4")
def test_criterion_5_robust_flat_across_missingness(sweep_c, verdict):
    worst = _max_abs(sweep_c, "R")
    assert verdict(5, "max |R bias| over c", worst < 0.025, f"max={worst:.4f}")


def test_criterion_6_dr_bias_grows(sweep_eta, verdict):
    gaps = {}
    for t in TARGETS:
        at = {r["x"]: abs(r["bias"]) for r in sweep_eta if r["estimator"] == "DR" and r["pdatt"] == f"{t}-00"}
        gaps[t] = at[0.0] - at[1.0]
    ok = any(g >= 0.01 for g in gaps.values())
    assert verdict(6, "DR bias at eta_m=0 vs 1", ok, f"gaps={ {t: round(g, 4) for t, g in gaps.items()} }")


@pytest.mark.xfail(strict=True, reason="one n=1e5 draw per point: R sd is about 0.022 for 11-00")
def test_criterion_6_robust_flat_across_misspecification(sweep_eta, verdict):
    worst = _max_abs(sweep_eta, "R")
    assert verdict(6, "max |R bias| over eta_m", worst < 0.025, f"max={worst:.4f}")


# ---------------------------------------------------------------------------
# 7-9: exact oracles

@pytest.fixture(scope="module")
def pop():
    return build()


def _spec(tag):
    return EstimandSpec(TreatmentPath.parse(tag))


def test_criterion_7_oracle_suite(pop, verdict):
    gaps = {}
    # (a) saturated fits reproduce the brute-force value
    gaps["a"] = max(abs(reduced_point(pop.sample, fit_nuisances(pop.sample, _spec(t)), f)
                        - pop.brute_pdatt(TreatmentPath.parse(t)))
                    for t in TARGETS for f in ("R", "OR", "IPW", "DR"))
    ok_a = gaps["a"] <= 1e-10
    # (b) one wrong model at a time
    rob, brk = 0.0, np.inf
    for t in TARGETS:
        truth = pop.brute_pdatt(TreatmentPath.parse(t))
        nus = true_nuisances(pop, _spec(t))
        for which in ("missing", "propensity", "outcome"):
            rob = max(rob, abs(robust_point(pop.sample, corrupt(nus, pop, which)) - truth))
        wrong = corrupt(nus, pop, "missing")
        for f in ("OR", "IPW", "DR"):
            brk = min(brk, abs(reduced_point(pop.sample, wrong, f) - truth))
    ok_b = rob <= 1e-10 and brk >= 1e-3
    # (c) decomposition terms
    dec = 0.0
    for t in TARGETS:
        nus = true_nuisances(pop, _spec(t))
        i, ii, iii, iv, _, vi = _six_terms(pop, corrupt(nus, pop, "missing"))
        dec = max(dec, abs(i - ii - vi), abs(iii - iv))
        for which in ("propensity", "outcome"):
            *_, v, vi = _six_terms(pop, corrupt(nus, pop, which))
            dec = max(dec, abs(v - vi))
    ok_c = dec <= 1e-12
    # (d) naive contrast as a weighted mix of the three PDATTs
    flat = build(pd2=FLAT_D2)
    tau = {t: flat.brute_pdatt(TreatmentPath.parse(t)) for t in TARGETS}
    mix = tau["11"] * flat.share_d1(1, 1) + tau["01"] * flat.share_d1(0, 1) - tau["10"] * flat.share_d1(1, 0)
    naive = abs(estimate_naive_prepost(flat.sample).tau_hat - mix)
    ok_d = naive <= 1e-10
    detail = f"(a)={gaps['a']:.1e} (b) robust={rob:.1e} break>={brk:.1e} (c)={dec:.1e} (d)={naive:.1e}"
    assert verdict(7, "enumeration oracles", ok_a and ok_b and ok_c and ok_d, detail)


def test_criterion_8_reduction_to_aipw(verdict):
    worst = 0.0
    for seed in range(100):
        smp = _random_full_sample(np.random.default_rng(seed))
        spec = _spec(TARGETS[seed % 3])
        d = spec.d
        nus = fit_nuisances(smp, spec, fix_phi=True)
        ind_d = ((smp.d1 == d.d1) & (smp.d2 == d.d2)).astype(float)
        ind_0 = ((smp.d1 == 0) & (smp.d2 == 0)).astype(float)
        pa = nus.pi_d1gd2.fitted
        p2 = nus.pi_d2.fitted if d.d2 else 1 - nus.pi_d2.fitted
        ratio = pa * p2 / (nus.pi_d1pgd2p.fitted * (1 - nus.pi_d2.fitted))
        r = smp.delta_y - nus.mu_dp.fitted
        aipw = np.sum(ind_d * r) / np.sum(ind_d) - np.sum(ratio * ind_0 * r) / np.sum(ratio * ind_0)
        worst = max(worst, abs(robust_point(smp, nus) - aipw))
    assert verdict(8, "S=1 reduction", worst <= 1e-12, f"max gap={worst:.1e}")


def test_criterion_9_first_stage_oracles(verdict):
    logit_gap = ols_gap = fd_gap = 0.0
    for seed in range(100):
        x, y = _logit_instance(seed)
        logit_gap = max(logit_gap, np.max(np.abs(fit_logit(y, x).coef - _oracle_logit(x, y))))
        rng = np.random.default_rng(1000 + seed)
        xo = np.column_stack([np.ones(150), rng.normal(size=(150, 3))])
        yo = xo @ rng.normal(size=4) + rng.normal(size=150)
        want = np.linalg.lstsq(xo, yo, rcond=None)[0]
        ols_gap = max(ols_gap, np.max(np.abs(fit_ols(yo, xo).coef - want)) / max(1.0, np.max(np.abs(want))))
        xs, ys = _logit_instance(seed, n=120, k=4)
        b = np.random.default_rng(seed).normal(scale=0.5, size=4)
        _, score, _ = logit_loglik(b, ys, xs)
        fd = np.array([(logit_loglik(b + 1e-5 * e, ys, xs)[0] - logit_loglik(b - 1e-5 * e, ys, xs)[0]) / 2e-5
                       for e in np.eye(4)])
        fd_gap = max(fd_gap, np.max(np.abs(fd - score)) / np.max(np.abs(score)))
    ok = logit_gap <= 1e-8 and ols_gap <= 1e-8 and fd_gap <= 1e-6
    assert verdict(9, "logit/OLS/score", ok, f"logit={logit_gap:.1e} ols={ols_gap:.1e} score={fd_gap:.1e}")


# ---------------------------------------------------------------------------
# 10-11: inference

def test_criterion_10_standard_errors_calibrated(mc_none, verdict):
    ratios = {}
    for m in ("R", "DR", "R-IMPROVED"):
        for t in TARGETS:
            c = mc_none.cell(m, t)
            ratios[f"{m}/{t}"] = c.mean_se / c.sd
    ok = all(abs(r - 1) <= 0.10 for r in ratios.values())
    assert verdict(10, "mean se / sd", ok, str({k: round(v, 3) for k, v in ratios.items()}))


@pytest.mark.xfail(strict=True, reason="the stepwise variance drops a non-vanishing w2-residual term")
def test_criterion_10_simplified_variance_identity(verdict):
    smp = generate_sample(DgpConfig(n=N, seed=SEED), replication_rng(SEED, 0))
    gaps = {}
    for t in TARGETS:
        fit = improved_fit(smp, t)
        psi = linearize(estimator_terms(smp, fit.nuisances, "R"), smp.x).psi
        gaps[t] = abs(fit.v_hat - float(np.mean(psi ** 2)))
    ok = all(g <= 1e-10 * max(1.0, fit.v_hat) for g in gaps.values())
    assert verdict(10, "V-hat equals E_n[psi^2]", ok, str({t: f"{g:.3g}" for t, g in gaps.items()}))


def _isotonic_deviation(grid, rej):
    # nondecreasing in |tau| on each side of zero
    grid, rej = np.asarray(grid), np.asarray(rej)
    dev = 0.0
    for side in (grid >= 0, grid <= 0):
        order = np.argsort(np.abs(grid[side]))
        y = rej[side][order]
        dev = max(dev, float(np.max(np.abs(y - isotonic_regression(y).x))))
    return dev


def test_criterion_11_power_curve(power, verdict):
    rej = power.rejection["R"]
    size = rej[POWER_GRID.index(0.0)]
    dev = _isotonic_deviation(POWER_GRID, rej)
    ok = 0.03 <= size <= 0.07 and dev < 0.03
    assert verdict(11, "size and monotone power", ok,
                   f"size={size:.3f} isotonic dev={dev:.3f} curve={[round(v, 3) for v in rej]}")


def test_power_curves_of_r_and_dr_agree(power):
    gap = max(abs(a - b) for a, b in zip(power.rejection["R"], power.rejection["DR"]))
    assert gap <= 0.05
