"""Point estimators for path-dependent ATTs with a partially missing middle treatment.

Every estimator here is a signed sum of Hajek ratios ``E_n[v h] / E_n[v]``.
Each ratio is described by a :class:`HajekTerm` that also carries the
derivatives of ``log v`` and ``h`` with respect to the first-stage
coefficients, so :mod:`pathdid.inference` can linearize any of them the same
way.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from .errors import EmptyCellError, ValidationError
from .first_stage import (NuisanceSet, _pivoted_rank, clamp, constant_fit, fit_logit, fit_nuisances, fit_ols,
                          influence_ingredients, logit_influence, ols_influence)
from .panel_data import EstimandSpec, PanelSample, TreatmentPath

METHODS = ("R", "OR", "IPW", "DR", "CC-OR", "CC-IPW", "CC-DR", "NAIVE", "WEAK-MAR-IPW", "R-IMPROVED")
ADJUSTED = ("R", "OR", "IPW", "DR")


@dataclass
class WeightSet:
    w1: np.ndarray
    w2: np.ndarray
    w3: np.ndarray
    w4: np.ndarray
    raw_denominators: tuple


@dataclass
class EstimateResult:
    tau_hat: float
    se: float
    ci: tuple
    method: str
    spec: EstimandSpec
    n_effective: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    influence: np.ndarray | None = field(default=None, repr=False)

    def row(self) -> dict:
        return {"method": self.method, "pdatt": self.spec.label, "tau_hat": self.tau_hat,
                "se": self.se, "ci_lower": self.ci[0], "ci_upper": self.ci[1],
                "level": self.spec.level}


@dataclass
class BoundsResult:
    lower: float
    upper: float
    y_min: float


# ---------------------------------------------------------------------------
# Hajek terms

@dataclass
class HajekTerm:
    """One signed ratio ``sign * E_n[v h] / E_n[v]``.

    ``dlogv[slot]`` and ``dh[slot]`` are per-row factors ``f`` such that the
    derivative row is ``f_i * design_i`` for that slot's design matrix.
    """

    sign: float
    v: np.ndarray
    h: np.ndarray
    dlogv: dict = field(default_factory=dict)
    dh: dict = field(default_factory=dict)
    name: str = ""

    @property
    def denominator(self) -> float:
        return float(np.mean(self.v))

    @property
    def weight(self) -> np.ndarray:
        return self.v / self.denominator

    @property
    def value(self) -> float:
        return float(np.mean(self.weight * self.h))


def _hajek_point(terms: Iterable[HajekTerm]) -> float:
    return float(sum(t.sign * t.value for t in terms))


def _require_mass(v, label):
    den = float(np.mean(v))
    if not den > 0.0:
        raise EmptyCellError(f"weight {label} has zero normalizing mean (empty cell)", label)
    return den


def _raw_weights(sample: PanelSample, nus: NuisanceSet):
    d, dp = nus.spec.d, nus.spec.d_prime
    phi_a = clamp(nus.phi_d2.fitted)
    phi_b = clamp(nus.phi_d2p.fitted)
    pi_dp = clamp(nus.pi_dp)
    ratio = nus.pi_d / pi_dp
    d2 = sample.d2_indicator(d.d2)
    v1 = sample.path_indicator(d) / phi_a
    v2 = sample.path_indicator(dp) * ratio / phi_b
    v3 = nus.pi_d1gd2.fitted * d2
    v4 = sample.s * d2 * nus.pi_d1gd2.fitted / phi_a
    return v1, v2, v3, v4


def compute_weights(sample: PanelSample, nus: NuisanceSet) -> WeightSet:
    """Self-normalized weights w1..w4 from fitted nuisances."""
    raw = _raw_weights(sample, nus)
    dens = tuple(_require_mass(v, f"w{j + 1}") for j, v in enumerate(raw))
    return WeightSet(*(v / den for v, den in zip(raw, dens)), raw_denominators=dens)


def _weight_factors(sample: PanelSample, nus: NuisanceSet):
    """d log v_j / d(slot), as per-row factors multiplying X."""
    d, dp = nus.spec.d, nus.spec.d_prime
    pa, pb = nus.pi_d1gd2.fitted, nus.pi_d1pgd2p.fitted
    p2 = nus.pi_d2.fitted
    dlog_p2 = {1: 1.0 - p2, 0: -p2}
    f1, f2, f3, f4 = {}, {}, {}, {}
    if not nus.phi_fixed:
        f1["delta_d2"] = -(1.0 - nus.phi_d2.fitted)
        f4["delta_d2"] = -(1.0 - nus.phi_d2.fitted)
        f2["delta_d2p"] = -(1.0 - nus.phi_d2p.fitted)
    f2["gamma_d1gd2"] = 1.0 - pa
    f2["gamma_d1pgd2p"] = -(1.0 - pb)
    f2["gamma_d2"] = dlog_p2[d.d2]
    f2["gamma_d2_den"] = -dlog_p2[dp.d2]
    f3["gamma_d1gd2"] = 1.0 - pa
    f4["gamma_d1gd2"] = 1.0 - pa
    return f1, f2, f3, f4


def estimator_terms(sample: PanelSample, nus: NuisanceSet, flavor: str = "R") -> list[HajekTerm]:
    """Hajek terms of the robust estimator or one of its OR/IPW/DR reductions."""
    if flavor not in ADJUSTED:
        raise ValidationError(f"unknown flavor {flavor!r}")
    v1, v2, v3, v4 = _raw_weights(sample, nus)
    for j, v in enumerate((v1, v2, v3, v4), start=1):
        _require_mass(v, f"w{j}")
    f1, f2, f3, f4 = _weight_factors(sample, nus)
    one = np.ones(sample.n)
    if flavor == "IPW":
        dy = sample.delta_y
        return [HajekTerm(1.0, v1, dy, f1, {}, "w1"), HajekTerm(-1.0, v2, dy, f2, {}, "w2")]
    mu_dp = nus.mu_dp.fitted
    r = sample.delta_y - mu_dp
    dr = {"beta_dp": -one}
    if flavor == "OR":
        return [HajekTerm(1.0, v1, r, f1, dr, "w1")]
    terms = [HajekTerm(1.0, v1, r, f1, dr, "w1"), HajekTerm(-1.0, v2, r, f2, dr, "w2")]
    if flavor == "DR":
        return terms
    dmu = nus.mu_d.fitted - mu_dp
    ddmu = {"beta_d": one, "beta_dp": -one}
    terms += [HajekTerm(1.0, v3, dmu, f3, ddmu, "w3"), HajekTerm(-1.0, v4, dmu, f4, ddmu, "w4")]
    return terms


def robust_point(sample: PanelSample, nus: NuisanceSet) -> float:
    w = compute_weights(sample, nus)
    r = sample.delta_y - nus.mu_dp.fitted
    dmu = nus.mu_d.fitted - nus.mu_dp.fitted
    return float(np.mean((w.w1 - w.w2) * r) + np.mean((w.w3 - w.w4) * dmu))


def reduced_point(sample: PanelSample, nus: NuisanceSet, flavor: str) -> float:
    w = compute_weights(sample, nus)
    if flavor == "IPW":
        return float(np.mean((w.w1 - w.w2) * sample.delta_y))
    r = sample.delta_y - nus.mu_dp.fitted
    if flavor == "OR":
        return float(np.mean(w.w1 * r))
    if flavor == "DR":
        return float(np.mean((w.w1 - w.w2) * r))
    if flavor == "R":
        return robust_point(sample, nus)
    raise ValidationError(f"unknown flavor {flavor!r}")


# ---------------------------------------------------------------------------
# Result assembly

def _diagnostics(sample, nus: NuisanceSet, weights: WeightSet) -> dict:
    divisors = [clamp(nus.phi_d2.fitted), clamp(nus.phi_d2p.fitted), clamp(nus.pi_dp)]
    return {
        "max_weight": float(max(np.max(w) for w in (weights.w1, weights.w2, weights.w3, weights.w4))),
        "min_clamped_probability": float(min(np.min(p) for p in divisors)),
        "iterations": nus.iterations(),
    }


def _n_effective(weights: WeightSet) -> dict:
    return {f"w{j}": int(np.count_nonzero(w))
            for j, w in enumerate((weights.w1, weights.w2, weights.w3, weights.w4), start=1)}


def _result(tau, infl, method, spec, n_eff, diag, with_se=True):
    from .inference import VarianceResult, confidence_interval

    if with_se and infl is not None:
        var = VarianceResult.from_influence(infl)
        se = var.se
    else:
        se = float("nan")
    ci = confidence_interval(tau, se, spec.level) if np.isfinite(se) else (float("nan"), float("nan"))
    return EstimateResult(float(tau), se, ci, method, spec, n_eff, diag, infl)


def _adjusted_results(sample, nus, spec, flavors, tag_prefix="", with_se=True):
    from .inference import linearize

    weights = compute_weights(sample, nus)
    diag = _diagnostics(sample, nus, weights)
    n_eff = _n_effective(weights)
    ingr = influence_ingredients(sample, nus) if with_se else None
    out = {}
    for flavor in flavors:
        terms = estimator_terms(sample, nus, flavor)
        if with_se:
            lin = linearize(terms, sample.x, b_map(ingr))
            out[tag_prefix + flavor] = _result(lin.tau, lin.xi, tag_prefix + flavor, spec, n_eff, diag)
        else:
            out[tag_prefix + flavor] = _result(_hajek_point(terms), None, tag_prefix + flavor,
                                               spec, n_eff, diag, False)
    return out


def b_map(ingr) -> dict:
    """Slot name to influence matrix of that coefficient vector."""
    return {
        "beta_d": ingr.b_beta_d, "beta_dp": ingr.b_beta_dp,
        "gamma_d1gd2": ingr.b_gamma_d1gd2, "gamma_d1pgd2p": ingr.b_gamma_d1pgd2p,
        "gamma_d2": ingr.b_gamma_d2, "gamma_d2_den": ingr.b_gamma_d2,
        "delta_d2": ingr.b_delta_d2, "delta_d2p": ingr.b_delta_d2p,
    }


def _as_spec(spec) -> EstimandSpec:
    if isinstance(spec, EstimandSpec):
        return spec
    return EstimandSpec(TreatmentPath.parse(spec))


def estimate_robust(sample: PanelSample, spec, nus: NuisanceSet | None = None) -> EstimateResult:
    spec = _as_spec(spec)
    nus = nus or fit_nuisances(sample, spec)
    return _adjusted_results(sample, nus, spec, ("R",))["R"]


def estimate_or(sample: PanelSample, spec, nus: NuisanceSet | None = None) -> EstimateResult:
    spec = _as_spec(spec)
    nus = nus or fit_nuisances(sample, spec)
    return _adjusted_results(sample, nus, spec, ("OR",))["OR"]


def estimate_ipw(sample: PanelSample, spec, nus: NuisanceSet | None = None) -> EstimateResult:
    spec = _as_spec(spec)
    nus = nus or fit_nuisances(sample, spec)
    return _adjusted_results(sample, nus, spec, ("IPW",))["IPW"]


def estimate_dr(sample: PanelSample, spec, nus: NuisanceSet | None = None) -> EstimateResult:
    spec = _as_spec(spec)
    nus = nus or fit_nuisances(sample, spec)
    return _adjusted_results(sample, nus, spec, ("DR",))["DR"]


def complete_case_nuisances(sample: PanelSample, spec: EstimandSpec) -> tuple[PanelSample, NuisanceSet]:
    obs = sample.s == 1
    if not np.any(obs):
        raise EmptyCellError("complete-case subsample is empty", "S=1")
    sub = sample.subset(obs)
    return sub, fit_nuisances(sub, spec, fix_phi=True)


def estimate_cc(sample: PanelSample, spec, flavor: str = "DR") -> EstimateResult:
    """Complete-case estimator: drop S = 0 rows, refit, and set the missingness model to 1."""
    spec = _as_spec(spec)
    sub, nus = complete_case_nuisances(sample, spec)
    return _adjusted_results(sub, nus, spec, (flavor,), "CC-")["CC-" + flavor]


# ---------------------------------------------------------------------------
# Naive pre/post contrast and bounds

def _d2_outcome_fits(sample: PanelSample, y):
    for v in (0, 1):
        if not np.any(sample.d2 == v):
            raise EmptyCellError(f"D2={v} group is empty", f"D2={v}")
    fit1 = fit_ols(y, sample, sample.d2 == 1, names=sample.column_names, label="mu_D2=1")
    fit0 = fit_ols(y, sample, sample.d2 == 0, names=sample.column_names, label="mu_D2=0")
    return fit1, fit0


def naive_terms(sample: PanelSample, fit1, fit0) -> list[HajekTerm]:
    one = np.ones(sample.n)
    return [HajekTerm(1.0, sample.d2.copy(), fit1.fitted - fit0.fitted, {},
                      {"beta_1": one, "beta_0": -one}, "naive")]


def estimate_naive_prepost(sample: PanelSample, spec=None) -> EstimateResult:
    """Regression-adjusted contrast of D2 = 1 versus D2 = 0, ignoring D1 entirely."""
    from .inference import linearize

    spec = _as_spec(spec or TreatmentPath(1, 1))
    fit1, fit0 = _d2_outcome_fits(sample, sample.delta_y)
    terms = naive_terms(sample, fit1, fit0)
    b = {"beta_1": ols_influence(fit1, sample.delta_y, sample.x),
         "beta_0": ols_influence(fit0, sample.delta_y, sample.x)}
    lin = linearize(terms, sample.x, b)
    n_eff = {"D2=1": int(np.sum(sample.d2 == 1)), "D2=0": int(np.sum(sample.d2 == 0))}
    return _result(lin.tau, lin.xi, "NAIVE", spec, n_eff, {})


def partial_id_bounds(sample: PanelSample, y_min: float) -> BoundsResult:
    """Bounds on the second-period aggregate effect under monotone response of the (1,0) path."""
    if sample.y2 is None:
        raise ValidationError("bounds need the final-period outcome level; map a y2 column")
    fit1, fit0 = _d2_outcome_fits(sample, sample.delta_y)
    lower = _hajek_point(naive_terms(sample, fit1, fit0))
    lev0 = fit_ols(sample.y2, sample, sample.d2 == 0, names=sample.column_names, label="y2_D2=0")
    gap = float(np.mean(sample.d2 * (lev0.fitted - y_min)) / np.mean(sample.d2))
    return BoundsResult(lower, lower + gap, float(y_min))


def aggregate_second_period(results, sample: PanelSample) -> float:
    """Average effect of the final-period treatment, mixing the (1,1) and (0,1) PDATTs.

    The mixing probability is the fitted P(D1 = 1 | D2 = 1, X) averaged over the
    D2 = 1 rows.
    """
    if isinstance(results, Mapping):
        items = results.values()
    else:
        items = results
    by_path = {r.spec.d: r for r in items}
    try:
        t11 = by_path[TreatmentPath(1, 1)].tau_hat
        t01 = by_path[TreatmentPath(0, 1)].tau_hat
    except KeyError as exc:
        raise ValidationError(f"missing component estimate for path {exc.args[0]}") from None
    grp = (sample.s == 1) & (sample.d2 == 1)
    d1 = sample.d1_indicator(1)[grp]
    if d1.size and np.all(d1 == d1[0]):
        # one-class subsample: the fitted probability is that class everywhere
        p = float(d1[0])
    else:
        fit = fit_logit(sample.d1_indicator(1), sample, grp, label="pi_1|1")
        p = float(np.mean(fit.fitted[sample.d2 == 1]))
    return t11 * p + t01 * (1.0 - p)


# ---------------------------------------------------------------------------
# Weak-MAR inverse probability weighting

@dataclass
class WeakMarFits:
    q_a: object
    q_b: object
    pi_a: object
    pi_b: object
    pi_d2: object
    design_a: np.ndarray
    design_b: np.ndarray


def _fit_q(sample, d2, label):
    """Logit of S on (X, dY) within a D2 group; dY is left out when it adds no rank."""
    grp = sample.d2 == d2
    if not np.any(grp & (sample.s == 1)):
        raise EmptyCellError(f"cell S=1, D2={d2} is empty", f"S=1, D2={d2}")
    design = np.column_stack([sample.x, sample.delta_y])
    if _pivoted_rank(design[grp])[0] < design.shape[1]:
        design = sample.x
    if np.all(sample.s[grp] == 1):
        return constant_fit(sample.n, design.shape[1], grp), design
    return fit_logit(sample.s, design, grp, label=label), design


def fit_weak_mar(sample: PanelSample, spec: EstimandSpec) -> WeakMarFits:
    d, dp = spec.d, spec.d_prime
    q_a, design_a = _fit_q(sample, d.d2, "q_d2")
    q_b, design_b = _fit_q(sample, dp.d2, "q_d2p")
    obs = sample.s == 1
    pi_a = fit_logit(sample.d1_indicator(d.d1), sample, obs & (sample.d2 == d.d2),
                     weights=1.0 / clamp(q_a.fitted), label="pi_d1gd2")
    pi_b = fit_logit(sample.d1_indicator(dp.d1), sample, obs & (sample.d2 == dp.d2),
                     weights=1.0 / clamp(q_b.fitted), label="pi_d1pgd2p")
    pi_2 = fit_logit(sample.d2, sample, None, label="pi_d2")
    return WeakMarFits(q_a, q_b, pi_a, pi_b, pi_2, design_a, design_b)


def weak_mar_terms(sample: PanelSample, spec: EstimandSpec, fits: WeakMarFits) -> list[HajekTerm]:
    d, dp = spec.d, spec.d_prime
    p2 = fits.pi_d2.fitted
    pd2 = {1: p2, 0: 1.0 - p2}
    dlog_p2 = {1: 1.0 - p2, 0: -p2}
    pa, pb = fits.pi_a.fitted, fits.pi_b.fitted
    ratio = pa * pd2[d.d2] / clamp(pb * pd2[dp.d2])
    v1 = sample.path_indicator(d) / clamp(fits.q_a.fitted)
    v2 = sample.path_indicator(dp) * ratio / clamp(fits.q_b.fitted)
    _require_mass(v1, "w1")
    _require_mass(v2, "w2")
    f1 = {} if fits.q_a.degenerate else {"q_a": -(1.0 - fits.q_a.fitted)}
    f2 = {} if fits.q_b.degenerate else {"q_b": -(1.0 - fits.q_b.fitted)}
    f2.update({"gamma_d1gd2": 1.0 - pa, "gamma_d1pgd2p": -(1.0 - pb),
               "gamma_d2": dlog_p2[d.d2], "gamma_d2_den": -dlog_p2[dp.d2]})
    dy = sample.delta_y
    return [HajekTerm(1.0, v1, dy, f1, {}, "w1"), HajekTerm(-1.0, v2, dy, f2, {}, "w2")]


def _weighted_logit_influence(sample, fit, y, q_fit, design_q, b_q):
    """Influence of an inverse-q weighted logit, including the estimated-weight correction."""
    x = sample.x
    n = sample.n
    m = fit.subsample_mask.astype(float)
    q = clamp(q_fit.fitted)
    wq = 1.0 / q
    p = fit.fitted
    resid = np.asarray(y, float) - p
    bread = (x * (m * wq * p * (1 - p))[:, None]).T @ x / n
    rows = x * (m * wq * resid)[:, None]
    if not q_fit.degenerate:
        jac = (x * (m * resid * -(1.0 - q_fit.fitted) / q)[:, None]).T @ design_q / n
        rows = rows + b_q @ jac.T
    return rows @ np.linalg.inv(bread).T


def estimate_weak_mar_ipw(sample: PanelSample, spec) -> EstimateResult:
    """IPW estimator when missingness may also depend on the outcome change."""
    from .inference import linearize

    spec = _as_spec(spec)
    fits = fit_weak_mar(sample, spec)
    terms = weak_mar_terms(sample, spec, fits)
    d, dp = spec.d, spec.d_prime
    bq_a = logit_influence(fits.q_a, sample.s, fits.design_a, label="q_d2")
    bq_b = logit_influence(fits.q_b, sample.s, fits.design_b, label="q_d2p")
    b_pi2 = logit_influence(fits.pi_d2, sample.d2, sample.x, label="pi_d2")
    b = {
        "q_a": bq_a, "q_b": bq_b,
        "gamma_d1gd2": _weighted_logit_influence(sample, fits.pi_a, sample.d1_indicator(d.d1),
                                                 fits.q_a, fits.design_a, bq_a),
        "gamma_d1pgd2p": _weighted_logit_influence(sample, fits.pi_b, sample.d1_indicator(dp.d1),
                                                   fits.q_b, fits.design_b, bq_b),
        "gamma_d2": b_pi2, "gamma_d2_den": b_pi2,
    }
    designs = {"q_a": fits.design_a, "q_b": fits.design_b}
    lin = linearize(terms, sample.x, b, designs)
    n_eff = {"w1": int(np.count_nonzero(terms[0].v)), "w2": int(np.count_nonzero(terms[1].v))}
    return _result(lin.tau, lin.xi, "WEAK-MAR-IPW", spec, n_eff, {})


# ---------------------------------------------------------------------------
# Batch estimation sharing first-stage fits

def estimate_many(sample: PanelSample, specs, methods, with_se: bool = True) -> list[EstimateResult]:
    """Run several estimators on several PDATTs, fitting each nuisance set once."""
    methods = list(methods)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise ValidationError(f"unknown estimator tag(s): {unknown}")
    out = []
    for spec in specs:
        spec = _as_spec(spec)
        found = {}
        adj = [m for m in ADJUSTED if m in methods]
        if adj:
            found.update(_adjusted_results(sample, fit_nuisances(sample, spec), spec, adj,
                                           with_se=with_se))
        cc = [m[3:] for m in methods if m.startswith("CC-")]
        if cc:
            sub, nus = complete_case_nuisances(sample, spec)
            found.update(_adjusted_results(sub, nus, spec, cc, "CC-", with_se=with_se))
        if "NAIVE" in methods:
            found["NAIVE"] = estimate_naive_prepost(sample, spec)
        if "WEAK-MAR-IPW" in methods:
            found["WEAK-MAR-IPW"] = estimate_weak_mar_ipw(sample, spec)
        if "R-IMPROVED" in methods:
            from .inference import estimate_robust_improved
            found["R-IMPROVED"] = estimate_robust_improved(sample, spec)
        out.extend(found[m] for m in methods)
    return out
