"""Influence functions, variances, confidence intervals and the inference-robust estimator."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Mapping

import numpy as np

from .errors import ValidationError
from .estimators import (EstimateResult, WeightSet, _as_spec, b_map, compute_weights,
                         estimator_terms)
from .first_stage import (LogitFit, NuisanceSet, clamp, constant_fit, fit_logit,
                          fit_ols, newton_maximize)
from .panel_data import PanelSample, TreatmentPath

# Sign with which each coefficient block enters the influence function when
# written as psi + b'E(Psi_beta_d) - b'E(Psi_beta_dp) - ... .
_PSI_SIGN = {"beta_d": 1.0, "beta_dp": -1.0, "gamma_d1gd2": -1.0, "gamma_d2": -1.0,
             "gamma_dp": -1.0, "delta_d2": 1.0, "delta_d2p": -1.0}


@dataclass
class Linearization:
    tau: float
    psi: np.ndarray
    grads: dict
    xi: np.ndarray


def linearize(terms, x, b: Mapping | None = None, designs: Mapping | None = None) -> Linearization:
    """First-order expansion of a signed sum of Hajek ratios.

    ``psi`` is the influence with the first stage held fixed (each ratio
    centered at its own sample mean); ``grads[slot]`` is the derivative of the
    estimate with respect to that slot's coefficients; ``xi`` adds
    ``b[slot] @ grads[slot]`` for every slot.
    """
    n = x.shape[0]
    designs = designs or {}
    psi = np.zeros(n)
    grads: dict = {}
    tau = 0.0
    for t in terms:
        w = t.v / np.mean(t.v)
        a = float(np.mean(w * t.h))
        tau += t.sign * a
        resid = t.h - a
        psi += t.sign * w * resid
        for slot, f in t.dlogv.items():
            z = designs.get(slot, x)
            grads[slot] = grads.get(slot, 0.0) + t.sign * (z.T @ (w * f * resid)) / n
        for slot, f in t.dh.items():
            z = designs.get(slot, x)
            grads[slot] = grads.get(slot, 0.0) + t.sign * (z.T @ (w * f)) / n
    xi = psi.copy()
    if b is not None:
        for slot, g in grads.items():
            if slot not in b:
                raise ValidationError(f"no influence matrix supplied for slot {slot!r}")
            xi += b[slot] @ g
    return Linearization(float(tau), psi, grads, xi)


@dataclass
class InfluenceVector:
    xi: np.ndarray
    method: str
    components: dict = field(default_factory=dict)


@dataclass
class VarianceResult:
    omega_hat: float
    se: float
    seb_hat: float | None = None

    @classmethod
    def from_influence(cls, xi, seb_hat=None) -> "VarianceResult":
        xi = np.asarray(xi, dtype=float)
        omega = float(np.mean(xi * xi))
        return cls(omega, float(np.sqrt(omega / xi.size)), seb_hat)


def _components(lin: Linearization) -> dict:
    g = lin.grads
    out = {"psi": lin.psi}
    slot_map = {
        "beta_d": ["beta_d"], "beta_dp": ["beta_dp"], "gamma_d1gd2": ["gamma_d1gd2"],
        "gamma_d2": ["gamma_d2", "gamma_d2_den"], "gamma_dp": ["gamma_d1pgd2p"],
        "delta_d2": ["delta_d2"], "delta_d2p": ["delta_d2p"],
    }
    for name, slots in slot_map.items():
        present = [g[s] for s in slots if s in g]
        if present:
            out[f"Psi_{name}"] = _PSI_SIGN[name] * sum(present)
    return out


def _check_tau(lin, tau_hat):
    if tau_hat is not None and not np.isclose(lin.tau, tau_hat, rtol=1e-9, atol=1e-9):
        raise ValidationError(f"tau_hat {tau_hat} does not match the weights/fits ({lin.tau})")


def influence_robust(sample: PanelSample, nus: NuisanceSet, weights: WeightSet | None,
                     tau_hat: float | None, ingredients) -> InfluenceVector:
    """Influence function of the robust estimator, including first-stage estimation effects."""
    lin = linearize(estimator_terms(sample, nus, "R"), sample.x, b_map(ingredients))
    _check_tau(lin, tau_hat)
    return InfluenceVector(lin.xi, "R", _components(lin))


def influence_reduced(sample, nus, weights, tau_hat, ingredients, flavor: str) -> InfluenceVector:
    lin = linearize(estimator_terms(sample, nus, flavor), sample.x, b_map(ingredients))
    _check_tau(lin, tau_hat)
    return InfluenceVector(lin.xi, flavor, _components(lin))


def confidence_interval(tau_hat: float, var, level: float = 0.95) -> tuple:
    """Normal interval ``tau_hat -/+ z * se``; ``var`` is a VarianceResult or an se."""
    if not 0.0 < level < 1.0:
        raise ValidationError(f"level must lie in (0,1), got {level}")
    se = var.se if isinstance(var, VarianceResult) else float(var)
    z = NormalDist().inv_cdf(0.5 + level / 2.0)
    return (tau_hat - z * se, tau_hat + z * se)


# ---------------------------------------------------------------------------
# Efficiency bound

@dataclass
class TrueNuisance:
    """True nuisance functions evaluated per observation (or callables of X).

    ``m[path]``: E[dY | D = path, X]; ``q[d2]``: P(S = 1 | D2 = d2, X);
    ``p_d2``: P(D2 = 1 | X); ``p_cond[(d1, d2)]``: P(D1 = d1 | D2 = d2, X).
    """

    m: Mapping
    q: Mapping
    p_d2: object
    p_cond: Mapping
    fitted: bool = False

    @staticmethod
    def _eval(v, x):
        return np.asarray(v(x) if callable(v) else v, dtype=float)

    def arrays(self, x, d: TreatmentPath, dp: TreatmentPath):
        m_d = self._eval(self.m[d], x)
        m_dp = self._eval(self.m[dp], x)
        p2 = self._eval(self.p_d2, x)
        pd2 = {1: p2, 0: 1.0 - p2}
        pc_d = self._eval(self.p_cond[(d.d1, d.d2)], x)
        pc_dp = self._eval(self.p_cond[(dp.d1, dp.d2)], x)
        return dict(m_d=m_d, m_dp=m_dp, pc_d=pc_d, p_d=pc_d * pd2[d.d2],
                    p_dp=pc_dp * pd2[dp.d2], q_d2=self._eval(self.q[d.d2], x),
                    q_d2p=self._eval(self.q[dp.d2], x))

    @classmethod
    def from_fits(cls, sample: PanelSample, nus: NuisanceSet) -> "TrueNuisance":
        d, dp = nus.spec.d, nus.spec.d_prime
        return cls(m={d: nus.mu_d.fitted, dp: nus.mu_dp.fitted},
                   q={d.d2: nus.phi_d2.fitted, dp.d2: nus.phi_d2p.fitted},
                   p_d2=nus.pi_d2.fitted,
                   p_cond={(d.d1, d.d2): nus.pi_d1gd2.fitted, (dp.d1, dp.d2): nus.pi_d1pgd2p.fitted},
                   fitted=True)


def efficient_influence(sample: PanelSample, truth: TrueNuisance, spec, tau=None):
    """Efficient influence function values and the target used to center them."""
    spec = _as_spec(spec)
    d, dp = spec.d, spec.d_prime
    a = truth.arrays(sample.x, d, dp)
    ep = float(np.mean(a["p_d"]))
    if tau is None:
        tau = float(np.mean((a["m_d"] - a["m_dp"]) * a["p_d"]) / ep)
    d2 = sample.d2_indicator(d.d2)
    w1 = sample.path_indicator(d) / clamp(a["q_d2"]) / ep
    w2 = sample.path_indicator(dp) * a["p_d"] / clamp(a["p_dp"]) / clamp(a["q_d2p"]) / ep
    w3 = a["pc_d"] * d2 / ep
    w4 = sample.s * d2 * a["pc_d"] / clamp(a["q_d2"]) / ep
    dy = sample.delta_y
    f = (w1 * (dy - a["m_dp"] - tau) - w2 * (dy - a["m_dp"])
         + (w3 - w4) * (a["m_d"] - a["m_dp"] - tau))
    return f, tau


def seb_estimate(sample: PanelSample, truth: TrueNuisance | None, spec, tau=None,
                 allow_fitted: bool = False, nus: NuisanceSet | None = None) -> float:
    """Sample second moment of the efficient influence function.

    Without ``truth`` the fitted nuisances stand in for the true ones, which
    must be requested explicitly via ``allow_fitted`` and triggers a warning.
    """
    spec = _as_spec(spec)
    if truth is None:
        if not allow_fitted:
            raise ValidationError("true nuisance functions are required (or pass allow_fitted=True)")
        from .first_stage import fit_nuisances
        nus = nus or fit_nuisances(sample, spec)
        truth = TrueNuisance.from_fits(sample, nus)
    if truth.fitted:
        warnings.warn("efficiency bound evaluated at fitted nuisances, not the truth", stacklevel=2)
    f, _ = efficient_influence(sample, truth, spec, tau)
    return float(np.mean(f * f))


# ---------------------------------------------------------------------------
# Inference-robust stepwise estimator

@dataclass
class ImprovedFit:
    nuisances: NuisanceSet
    weights: WeightSet
    tau: float
    v_hat: float
    dropped_d: tuple
    dropped_dp: tuple


def _tilt_missing_d2(sample, pi_a, grp, start):
    """delta_d2 solving E_n[1[D2=d2] pi (S/phi - 1) X] = 0."""
    x = sample.x[grp]
    s = sample.s[grp]
    p = pi_a[grp]
    m = x.shape[0]

    def obj(delta):
        eta = x @ delta
        e = np.exp(-eta)
        val = float(np.sum(p * ((s - 1.0) * eta - s * e))) / m
        score = x.T @ (p * (s - 1.0 + s * e)) / m
        neg_h = (x * (p * s * e)[:, None]).T @ x / m
        return val, score, neg_h

    return newton_maximize(obj, start, label="delta_d2 tilting")


def _tilt_missing_d2p(sample, ratio, phi_a, ind_d, ind_dp, start):
    """delta_d2p solving E_n[S (1[D=d'] ratio / phi' - 1[D=d] / phi) X] = 0."""
    obs = sample.s == 1
    x = sample.x[obs]
    r = (ratio * ind_dp)[obs]
    a = (ind_d / clamp(phi_a))[obs]
    m = x.shape[0]

    def obj(delta):
        eta = x @ delta
        e = np.exp(-eta)
        val = float(np.sum(r * (eta - e) - a * eta)) / m
        score = x.T @ (r * (1.0 + e) - a) / m
        neg_h = (x * (r * e)[:, None]).T @ x / m
        return val, score, neg_h

    return newton_maximize(obj, start, label="delta_d2p tilting")


def _logit_fit(coef, x, mask, iterations=0):
    from scipy.special import expit
    return LogitFit(coef, expit(x @ coef), mask, True, iterations, np.zeros((len(coef),) * 2))


def _augmented_outcome_fits(sample, w, pi_a, pi_b, phi_a, ind_d, ind_dp):
    # Columns vanish outside their cells; those zero or collinear on the
    # fitting cell are dropped.
    x = sample.x
    xs = lambda f: x * f[:, None]
    names = list(sample.column_names)
    design_dp = np.hstack([x, xs(w.w2), xs(pi_a.fitted * w.w2), xs(pi_b.fitted * w.w2),
                           xs(w.w1), xs(phi_a.fitted * w.w1)])
    names_dp = names + [f"{tag}*{c}" for tag in ("w2", "pi_d*w2", "pi_dp*w2", "w1", "phi*w1")
                        for c in names]
    mu_dp = fit_ols(sample.delta_y, design_dp, ind_dp == 1, drop_collinear=True,
                    names=names_dp, label="mu_dp augmented")
    design_d = np.hstack([x, xs(pi_a.fitted * (w.w3 - w.w4)), xs(w.w3), xs(w.w4),
                          xs(phi_a.fitted * w.w4)])
    names_d = names + [f"{tag}*{c}" for tag in ("pi*(w3-w4)", "w3", "w4", "phi*w4")
                       for c in names]
    mu_d = fit_ols(sample.delta_y, design_d, ind_d == 1, drop_collinear=True,
                   names=names_d, label="mu_d augmented")
    if mu_dp.dropped or mu_d.dropped:
        warnings.warn(f"dropped collinear augmentation columns: {mu_dp.dropped + mu_d.dropped}",
                      stacklevel=3)
    return mu_d, mu_dp


def improved_fit(sample: PanelSample, spec, augment: bool = False) -> ImprovedFit:
    """Stepwise estimation in which the missingness fits are chosen to balance
    the weights, so that first-stage estimation has no first-order effect.

    The two tilting steps make ``E_n[(w3 - w4) X]`` and ``E_n[(w1 - w2) X]``
    vanish exactly. With ``augment`` the outcome regressions also include
    weight-scaled copies of X, built from each row's estimated weights and
    fitted on the outcome cell; off-cell predictions then extrapolate badly,
    so plain regressions on X are the default.
    """
    spec = _as_spec(spec)
    d, dp = spec.d, spec.d_prime
    x = sample.x
    n, k = x.shape
    obs = sample.s == 1
    ind_d = sample.path_indicator(d)
    ind_dp = sample.path_indicator(dp)
    for lab, ind in ((d, ind_d), (dp, ind_dp)):
        if ind.sum() < k:
            from .errors import EmptyCellError
            raise EmptyCellError(f"precondition failed: cell S=1, D=({lab.d1},{lab.d2}) too small",
                                 f"S=1, D=({lab.d1},{lab.d2})")
    pi_a = fit_logit(sample.d1_indicator(d.d1), sample, obs & (sample.d2 == d.d2), label="pi_d1gd2")
    pi_b = fit_logit(sample.d1_indicator(dp.d1), sample, obs & (sample.d2 == dp.d2), label="pi_d1pgd2p")
    pi_2 = fit_logit(sample.d2, sample, None, label="pi_d2")
    p2 = {1: pi_2.fitted, 0: 1.0 - pi_2.fitted}
    ratio = pi_a.fitted * p2[d.d2] / clamp(pi_b.fitted * p2[dp.d2])

    grp_a = sample.d2 == d.d2
    if np.all(sample.s[grp_a] == 1):
        phi_a = constant_fit(n, k, grp_a)
    else:
        warm = fit_logit(sample.s, sample, grp_a, label="phi_d2 warm start").coef
        res = _tilt_missing_d2(sample, pi_a.fitted, grp_a, warm)
        phi_a = _logit_fit(res.coef, x, grp_a, res.iterations)
    grp_b = sample.d2 == dp.d2
    if np.all(sample.s[grp_b] == 1):
        phi_b = constant_fit(n, k, grp_b)
    else:
        warm = fit_logit(sample.s, sample, grp_b, label="phi_d2p warm start").coef
        res = _tilt_missing_d2p(sample, ratio, phi_a.fitted, ind_d, ind_dp, warm)
        phi_b = _logit_fit(res.coef, x, grp_b, res.iterations)

    nus = NuisanceSet(phi_a, phi_b, pi_a, pi_b, pi_2, None, None, spec)
    w = compute_weights(sample, nus)

    if augment:
        mu_d, mu_dp = _augmented_outcome_fits(sample, w, pi_a, pi_b, phi_a, ind_d, ind_dp)
    else:
        mu_dp = fit_ols(sample.delta_y, sample, ind_dp == 1, label="mu_dp")
        mu_d = fit_ols(sample.delta_y, sample, ind_d == 1, label="mu_d")

    nus = NuisanceSet(phi_a, phi_b, pi_a, pi_b, pi_2, mu_d, mu_dp, spec)
    r = sample.delta_y - mu_dp.fitted
    dmu = mu_d.fitted - mu_dp.fitted
    tau = float(np.mean((w.w1 - w.w2) * r) + np.mean((w.w3 - w.w4) * dmu))
    f = w.w1 * (r - tau) - w.w2 * r + (w.w3 - w.w4) * (dmu - tau)
    return ImprovedFit(nus, w, tau, float(np.mean(f * f)), mu_d.dropped, mu_dp.dropped)


def estimate_robust_improved(sample: PanelSample, spec, augment: bool = False) -> EstimateResult:
    spec = _as_spec(spec)
    fit = improved_fit(sample, spec, augment)
    se = float(np.sqrt(fit.v_hat / sample.n))
    diag = {"v_hat": fit.v_hat, "dropped_columns": list(fit.dropped_dp + fit.dropped_d)}
    n_eff = {f"w{j}": int(np.count_nonzero(v)) for j, v in
             enumerate((fit.weights.w1, fit.weights.w2, fit.weights.w3, fit.weights.w4), start=1)}
    return EstimateResult(fit.tau, se, confidence_interval(fit.tau, se, spec.level),
                          "R-IMPROVED", spec, n_eff, diag)
