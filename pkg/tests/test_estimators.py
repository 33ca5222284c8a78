from fractions import Fraction as F

import numpy as np
import pytest

from enumeration import _logit, build, corrupt, true_nuisances
from pathdid import (EstimandSpec, PanelSample, TreatmentPath, aggregate_second_period,
                     compute_weights, estimate_cc, estimate_dr, estimate_ipw,
                     estimate_naive_prepost, estimate_robust, estimate_weak_mar_ipw,
                     partial_id_bounds)
from pathdid.errors import EmptyCellError, ValidationError
from pathdid.estimators import estimate_many, reduced_point, robust_point
from pathdid.first_stage import NuisanceSet, fit_nuisances
from pathdid.inference import estimate_robust_improved

TARGETS = ["11", "10", "01"]
FLAVORS = ["R", "OR", "IPW", "DR"]


def spec_of(tag):
    return EstimandSpec(TreatmentPath.parse(tag))


@pytest.fixture(scope="module")
def pop():
    return build()


# ---------------------------------------------------------------------------
# saturated enumeration: every estimator hits the brute-force value

@pytest.mark.parametrize("tag", TARGETS)
@pytest.mark.parametrize("flavor", FLAVORS)
def test_fitted_estimators_equal_brute_force(pop, tag, flavor):
    spec = spec_of(tag)
    nus = fit_nuisances(pop.sample, spec)
    assert reduced_point(pop.sample, nus, flavor) == pytest.approx(pop.brute_pdatt(spec.d), abs=1e-10)


@pytest.mark.parametrize("tag", TARGETS)
def test_propensity_weighted_closed_form(pop, tag):
    # E[(m_d - m_00) p_d] / E[p_d], summed over covariate cells with exact fractions
    d = TreatmentPath.parse(tag)
    num = den = F(0)
    for x in (0, 1):
        p2 = pop.pd2[x] if d.d2 else 1 - pop.pd2[x]
        p1 = pop.pd1[(d.d2, x)] if d.d1 else 1 - pop.pd1[(d.d2, x)]
        pd = p2 * p1
        num += pop.px[x] * pd * (pop.m[(d.d1, d.d2, x)] - pop.m[(0, 0, x)])
        den += pop.px[x] * pd
    tau = estimate_robust(pop.sample, tag).tau_hat
    assert tau == pytest.approx(float(num / den), abs=1e-10)
    assert pop.brute_pdatt(d) == pytest.approx(float(num / den), abs=1e-12)


@pytest.mark.parametrize("tag", TARGETS)
@pytest.mark.parametrize("which", ["missing", "propensity", "outcome"])
def test_robust_survives_any_single_wrong_model(pop, tag, which):
    spec = spec_of(tag)
    nus = corrupt(true_nuisances(pop, spec), pop, which)
    assert robust_point(pop.sample, nus) == pytest.approx(pop.brute_pdatt(spec.d), abs=1e-10)


@pytest.mark.parametrize("tag", TARGETS)
@pytest.mark.parametrize("flavor", ["OR", "IPW", "DR"])
def test_reduced_estimators_break_with_wrong_missing_model(pop, tag, flavor):
    spec = spec_of(tag)
    nus = corrupt(true_nuisances(pop, spec), pop, "missing")
    assert abs(reduced_point(pop.sample, nus, flavor) - pop.brute_pdatt(spec.d)) >= 1e-3


def _six_terms(pop, nus):
    w = compute_weights(pop.sample, nus)
    dy = pop.sample.delta_y
    mu, mup = nus.mu_d.fitted, nus.mu_dp.fitted
    e = lambda a: float(np.mean(a))
    return (e(w.w1 * dy), e(w.w1 * mup), e(w.w2 * dy), e(w.w2 * mup),
            e(w.w3 * (mu - mup)), e(w.w4 * (mu - mup)))


@pytest.mark.parametrize("tag", TARGETS)
def test_decomposition_when_propensity_and_outcome_are_right(pop, tag):
    nus = corrupt(true_nuisances(pop, spec_of(tag)), pop, "missing")
    i, ii, iii, iv, v, vi = _six_terms(pop, nus)
    assert abs(i - ii - vi) < 1e-12
    assert abs(iii - iv) < 1e-12


@pytest.mark.parametrize("tag", TARGETS)
@pytest.mark.parametrize("which", ["propensity", "outcome"])
def test_decomposition_when_missing_model_is_right(pop, tag, which):
    nus = corrupt(true_nuisances(pop, spec_of(tag)), pop, which)
    *_, v, vi = _six_terms(pop, nus)
    assert abs(v - vi) < 1e-12


# ---------------------------------------------------------------------------
# weights

def test_weights_small_example():
    d1 = np.array([1, 0, 1, 0.0])
    s = PanelSample.from_arrays(np.array([1.0, 0.0, 2.0, 1.0]), np.ones(4), d1, d1, np.zeros((4, 0)))
    one = np.ones(4)
    nus = NuisanceSet(_logit(one, one > 0), _logit(one, one > 0), _logit(one, one > 0),
                      _logit(one, one > 0), _logit(one / 2, one > 0), None, None, spec_of("11"))
    w = compute_weights(s, nus)
    assert np.allclose(w.w1, [2, 0, 2, 0], atol=1e-12)


@pytest.mark.parametrize("tag", TARGETS)
def test_weights_equal_population_weights(pop, tag):
    spec = spec_of(tag)
    d = spec.d
    w = compute_weights(pop.sample, fit_nuisances(pop.sample, spec))
    # every raw weight has population mean P(D = d)
    p_d = sum(pop.px[x] * (pop.pd2[x] if d.d2 else 1 - pop.pd2[x])
              * (pop.pd1[(d.d2, x)] if d.d1 else 1 - pop.pd1[(d.d2, x)]) for x in (0, 1))
    pd1 = lambda a, b, x: pop.pd1[(b, x)] if a else 1 - pop.pd1[(b, x)]
    pd2 = lambda b, x: pop.pd2[x] if b else 1 - pop.pd2[x]
    expect = np.zeros((4, pop.sample.n))
    smp = pop.sample
    for i in range(smp.n):
        x, b, a = int(pop.x1[i]), int(smp.d2[i]), int(pop.full_d1[i])
        s = int(smp.s[i])
        on_d = s and a == d.d1 and b == d.d2
        on_00 = s and a == 0 and b == 0
        ratio = pd1(d.d1, d.d2, x) * pd2(d.d2, x) / (pd1(0, 0, x) * pd2(0, x))
        expect[0, i] = on_d / pop.q[(d.d2, x)] / p_d
        expect[1, i] = on_00 * ratio / pop.q[(0, x)] / p_d
        expect[2, i] = (b == d.d2) * pd1(d.d1, d.d2, x) / p_d
        expect[3, i] = s * (b == d.d2) * pd1(d.d1, d.d2, x) / pop.q[(d.d2, x)] / p_d
    for got, want in zip((w.w1, w.w2, w.w3, w.w4), expect):
        assert np.max(np.abs(got - want)) < 1e-10


def test_weight_support_and_normalization(pop):
    spec = spec_of("10")
    smp = pop.sample
    w = compute_weights(smp, fit_nuisances(smp, spec))
    for v in (w.w1, w.w2, w.w3, w.w4):
        assert abs(np.mean(v) - 1.0) < 1e-12
        assert np.all(v >= 0)
    assert np.all(w.w1[smp.path_indicator(spec.d) == 0] == 0)
    assert np.all(w.w2[smp.path_indicator(spec.d_prime) == 0] == 0)
    assert np.all(w.w3[smp.d2 != spec.d.d2] == 0)
    assert np.all(w.w4[(smp.s * (smp.d2 == spec.d.d2)) == 0] == 0)


def test_empty_cell_is_reported():
    pop = build(pd1={(0, 0): F(0), (0, 1): F(0), (1, 0): F(3, 4), (1, 1): F(1, 2)})
    with pytest.raises(EmptyCellError, match=r"D=\(1,0\)"):
        estimate_robust(pop.sample, "10")


# ---------------------------------------------------------------------------
# reduction to the full-data estimator

def _random_full_sample(rng, n=400):
    x = rng.normal(size=(n, 2))
    d2 = (rng.random(n) < 1 / (1 + np.exp(-x[:, 0]))).astype(float)
    d1 = (rng.random(n) < 1 / (1 + np.exp(-0.5 + x[:, 1] - d2))).astype(float)
    dy = x @ np.array([1.0, -0.5]) + d1 + 2 * d2 + rng.normal(size=n)
    return PanelSample.from_arrays(dy, np.ones(n), d1, d2, x)


@pytest.mark.parametrize("seed", range(100))
def test_reduction_to_full_data_aipw(seed):
    rng = np.random.default_rng(seed)
    smp = _random_full_sample(rng)
    tag = TARGETS[seed % 3]
    spec = spec_of(tag)
    nus = fit_nuisances(smp, spec, fix_phi=True)
    d = spec.d
    ind_d = ((smp.d1 == d.d1) & (smp.d2 == d.d2)).astype(float)
    ind_0 = ((smp.d1 == 0) & (smp.d2 == 0)).astype(float)
    pa = nus.pi_d1gd2.fitted
    p2 = nus.pi_d2.fitted if d.d2 else 1 - nus.pi_d2.fitted
    pdp = nus.pi_d1pgd2p.fitted * (1 - nus.pi_d2.fitted)
    r = smp.delta_y - nus.mu_dp.fitted
    dmu = nus.mu_d.fitted - nus.mu_dp.fitted
    ratio = pa * p2 / pdp
    g = (smp.d2 == d.d2).astype(float)
    aipw = (np.sum(ind_d * r) / np.sum(ind_d) - np.sum(ratio * ind_0 * r) / np.sum(ratio * ind_0)
            + np.sum(pa * g * dmu) / np.sum(pa * g) - np.sum(pa * g * dmu) / np.sum(pa * g))
    assert abs(robust_point(smp, nus) - aipw) < 1e-12


# ---------------------------------------------------------------------------
# other estimands

def test_dr_with_zero_outcome_model_is_ipw(pop):
    from dataclasses import replace
    spec = spec_of("01")
    nus = fit_nuisances(pop.sample, spec)
    nus = replace(nus, mu_dp=replace(nus.mu_dp, fitted=np.zeros(pop.sample.n)))
    assert reduced_point(pop.sample, nus, "DR") == reduced_point(pop.sample, nus, "IPW")


def test_robust_zero_when_outcome_is_flat():
    rng = np.random.default_rng(3)
    n = 300
    x = rng.normal(size=(n, 1))
    d2 = (rng.random(n) < 0.5).astype(float)
    d1 = (rng.random(n) < 0.5).astype(float)
    s = (rng.random(n) < 0.7).astype(float)
    smp = PanelSample.from_arrays(np.full(n, 2.5), s, d1, d2, x)
    for tag in TARGETS:
        assert abs(estimate_robust(smp, tag).tau_hat) < 1e-12


def test_complete_case_equals_dr_without_missingness():
    smp = _random_full_sample(np.random.default_rng(11))
    for tag in TARGETS:
        assert estimate_cc(smp, tag, "DR").tau_hat == pytest.approx(estimate_dr(smp, tag).tau_hat, abs=1e-12)


def test_complete_case_unbiased_when_missingness_ignores_x():
    q = {(0, 0): F(1, 2), (0, 1): F(1, 2), (1, 0): F(3, 4), (1, 1): F(3, 4)}
    pop = build(q=q)
    for tag in TARGETS:
        for flavor in ("OR", "IPW", "DR"):
            got = estimate_cc(pop.sample, tag, flavor).tau_hat
            assert got == pytest.approx(pop.brute_pdatt(TreatmentPath.parse(tag)), abs=1e-10)


def test_complete_case_biased_when_missingness_depends_on_x(pop):
    got = estimate_cc(pop.sample, "11", "DR").tau_hat
    assert abs(got - pop.brute_pdatt(TreatmentPath(1, 1))) > 1e-3


# naive contrast: the mixing identity needs the same covariate law in both D2 groups
FLAT_D2 = {0: F(1, 4), 1: F(1, 4)}


def test_naive_is_weighted_mix_of_pdatts():
    pop = build(pd2=FLAT_D2)
    t = {tag: pop.brute_pdatt(TreatmentPath.parse(tag)) for tag in TARGETS}
    expect = (t["11"] * pop.share_d1(1, 1) + t["01"] * pop.share_d1(0, 1)
              - t["10"] * pop.share_d1(1, 0))
    assert estimate_naive_prepost(pop.sample).tau_hat == pytest.approx(expect, abs=1e-10)


def test_naive_identifies_11_when_d1_equals_d2():
    pd1 = {(0, 0): F(0), (0, 1): F(0), (1, 0): F(1), (1, 1): F(1)}
    pop = build(pd1=pd1, pd2=FLAT_D2)
    assert estimate_naive_prepost(pop.sample).tau_hat == pytest.approx(
        pop.brute_pdatt(TreatmentPath(1, 1)), abs=1e-10)


def test_naive_zero_for_flat_outcome(pop):
    smp = pop.sample.replace(delta_y=np.zeros(pop.sample.n))
    assert estimate_naive_prepost(smp).tau_hat == 0.0


# weak MAR: outcome-dependent missingness with odds 2^(dy - 1) or 2^(1 - dy)
WM_M = {(0, 0, 0): F(1), (0, 0, 1): F(1), (1, 0, 0): F(2), (1, 0, 1): F(1),
        (0, 1, 0): F(2), (0, 1, 1): F(2), (1, 1, 0): F(2), (1, 1, 1): F(1)}


def _wm_q(d2, x, dy):
    odds = F(2) ** int(dy - 1 if d2 == 0 else 1 - dy)
    return odds / (1 + odds)


@pytest.mark.parametrize("tag", TARGETS)
def test_weak_mar_ipw_matches_population_formula(tag):
    pop = build(q=_wm_q, m=WM_M)
    d = TreatmentPath.parse(tag)
    got = estimate_weak_mar_ipw(pop.sample, tag).tau_hat
    assert got == pytest.approx(pop.brute_pdatt(d), abs=1e-10)
    # the plain MAR estimator is fooled by outcome-dependent missingness
    assert abs(estimate_ipw(pop.sample, tag).tau_hat - pop.brute_pdatt(d)) > 1e-3


@pytest.mark.parametrize("tag", TARGETS)
def test_weak_mar_ipw_reduces_to_ipw(pop, tag):
    assert estimate_weak_mar_ipw(pop.sample, tag).tau_hat == pytest.approx(
        estimate_ipw(pop.sample, tag).tau_hat, abs=1e-10)


def test_weak_mar_zero_outcome():
    smp = _random_full_sample(np.random.default_rng(5))
    s = (np.random.default_rng(6).random(smp.n) < 0.6).astype(float)
    smp = smp.replace(s=s, delta_y=np.zeros(smp.n))
    assert abs(estimate_weak_mar_ipw(smp, "11").tau_hat) < 1e-12


# bounds
def _with_y2(pop, base=10.0):
    return pop.sample.replace(y2=pop.sample.delta_y + base)


def test_bounds_need_final_level(pop):
    with pytest.raises(ValidationError):
        partial_id_bounds(pop.sample, 0.0)


def test_bounds_bracket_second_period_effect():
    pop = build(pd2=FLAT_D2)
    smp = _with_y2(pop)
    b = partial_id_bounds(smp, float(np.min(smp.y2)))
    t = {tag: pop.brute_pdatt(TreatmentPath.parse(tag)) for tag in TARGETS}
    target = t["11"] * pop.share_d1(1, 1) + t["01"] * pop.share_d1(0, 1)
    assert b.lower <= target + 1e-12
    assert target <= b.upper + 1e-12


def test_bounds_width_with_constant_level():
    rng = np.random.default_rng(2)
    smp = _random_full_sample(rng)
    y2 = np.where(smp.d2 == 0, 4.0, 7.0 + rng.random(smp.n))
    b = partial_id_bounds(smp.replace(y2=y2), 1.5)
    assert b.upper - b.lower == pytest.approx(2.5, abs=1e-12)
    assert b.lower <= b.upper


# second-period aggregate
def test_aggregate_matches_brute_force(pop):
    res = [estimate_robust(pop.sample, tag) for tag in TARGETS]
    t = {tag: pop.brute_pdatt(TreatmentPath.parse(tag)) for tag in TARGETS}
    expect = t["11"] * pop.share_d1(1, 1) + t["01"] * pop.share_d1(0, 1)
    assert aggregate_second_period(res, pop.sample) == pytest.approx(expect, abs=1e-10)


def test_aggregate_equal_components(pop):
    from dataclasses import replace
    res = [replace(estimate_robust(pop.sample, tag), tau_hat=0.7) for tag in ("11", "01")]
    assert aggregate_second_period(res, pop.sample) == pytest.approx(0.7, abs=1e-14)


def test_aggregate_all_treated_in_middle():
    pop = build(pd1={(0, 0): F(1, 4), (0, 1): F(1, 2), (1, 0): F(1), (1, 1): F(1)})
    from dataclasses import replace
    r11 = replace(estimate_robust(build().sample, "11"), tau_hat=1.25)
    r01 = replace(r11, tau_hat=-3.0, spec=spec_of("01"))
    assert aggregate_second_period([r11, r01], pop.sample) == pytest.approx(1.25, abs=1e-8)


def test_aggregate_needs_components(pop):
    with pytest.raises(ValidationError):
        aggregate_second_period([estimate_robust(pop.sample, "11")], pop.sample)


# improved estimator on the enumeration
@pytest.mark.parametrize("tag", TARGETS)
def test_improved_equals_brute_force(pop, tag):
    got = estimate_robust_improved(pop.sample, tag).tau_hat
    assert got == pytest.approx(pop.brute_pdatt(TreatmentPath.parse(tag)), abs=1e-8)


# ---------------------------------------------------------------------------
# invariances

def _draw(seed=1, n=2000):
    from pathdid import DgpConfig, generate_sample, replication_rng
    return generate_sample(DgpConfig(n=n), replication_rng(seed, 0))


def test_scale_equivariance():
    smp = _draw()
    kappa = 4.0
    scaled = smp.replace(delta_y=smp.delta_y * kappa)
    methods = ["R", "OR", "IPW", "DR", "CC-DR", "NAIVE"]
    base = estimate_many(smp, ["11", "01"], methods, with_se=False)
    big = estimate_many(scaled, ["11", "01"], methods, with_se=False)
    for a, b in zip(base, big):
        assert b.tau_hat == pytest.approx(kappa * a.tau_hat, rel=1e-12, abs=1e-12)


def test_permutation_invariance():
    smp = _draw(2)
    perm = np.random.default_rng(0).permutation(smp.n)
    shuffled = smp.subset(perm)
    for a, b in zip(estimate_many(smp, TARGETS, ["R", "DR", "CC-IPW"]),
                    estimate_many(shuffled, TARGETS, ["R", "DR", "CC-IPW"])):
        assert b.tau_hat == pytest.approx(a.tau_hat, abs=1e-10)
        assert b.se == pytest.approx(a.se, rel=1e-8)


def test_unknown_method_rejected(pop):
    with pytest.raises(ValidationError):
        estimate_many(pop.sample, ["11"], ["XYZ"])
