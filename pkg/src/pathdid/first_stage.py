"""Parametric working models: logit missingness/propensity fits and linear outcome means."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg as spl
from scipy.special import expit

from .errors import (DegenerateOutcomeError, EmptyCellError, NonConvergenceError,
                     NumericalError, SeparationError, SingularityError)
from .panel_data import EstimandSpec, PanelSample

SCORE_TOL = 1e-8
STEP_TOL = 1e-10
MAX_ITER = 100
MAX_HALVINGS = 30
SEPARATION_BOUND = 30.0
PROB_CLAMP = 1e-6
RANK_TOL = 1e-10


def clamp(p):
    """Clamp probabilities that are about to be used as divisors."""
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def _design(data) -> tuple[np.ndarray, tuple]:
    if isinstance(data, PanelSample):
        return data.x, data.column_names
    x = np.asarray(data, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    return x, tuple(f"x{j}" for j in range(x.shape[1]))


# ---------------------------------------------------------------------------
# Newton ascent with step halving

@dataclass
class NewtonResult:
    coef: np.ndarray
    value: float
    score: np.ndarray
    neg_hessian: np.ndarray
    iterations: int
    trace: list


def newton_maximize(objective: Callable, start, *, score_tol=SCORE_TOL, step_tol=STEP_TOL,
                    max_iter=MAX_ITER, max_halvings=MAX_HALVINGS,
                    separation_bound=SEPARATION_BOUND, label="objective") -> NewtonResult:
    """Maximize a smooth concave function.

    ``objective(b)`` returns ``(value, score, neg_hessian)``. Stops when the
    score max-norm and the relative coefficient change both fall below their
    tolerances.
    """
    b = np.array(start, dtype=float)
    val, g, h = objective(b)
    trace = [(0, val, float(np.max(np.abs(g))), 0)]
    rel_step = np.inf
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < score_tol and rel_step < step_tol:
            return NewtonResult(b, val, g, h, it - 1, trace)
        try:
            step = spl.solve(h, g, assume_a="pos")
        except (np.linalg.LinAlgError, spl.LinAlgError, ValueError):
            try:
                step = spl.solve(h, g)
            except (np.linalg.LinAlgError, spl.LinAlgError) as exc:
                raise SingularityError(f"{label}: singular Hessian at iteration {it}") from exc
        if not np.all(np.isfinite(step)):
            raise SingularityError(f"{label}: singular Hessian at iteration {it}")
        t = 1.0
        for halvings in range(max_halvings + 1):
            cand = b + t * step
            cval, cg, ch = objective(cand)
            if np.isfinite(cval) and cval >= val - 1e-13 * (1.0 + abs(val)):
                break
            t *= 0.5
        else:
            if np.max(np.abs(g)) < score_tol:
                return NewtonResult(b, val, g, h, it - 1, trace)
            raise NonConvergenceError(f"{label}: line search failed at iteration {it}", trace)
        rel_step = np.max(np.abs(cand - b)) / max(1.0, np.max(np.abs(cand)))
        b, val, g, h = cand, cval, cg, ch
        trace.append((it, val, float(np.max(np.abs(g))), halvings))
        if np.max(np.abs(b)) > separation_bound:
            raise SeparationError(
                f"{label}: coefficients exceed {separation_bound:g} in magnitude "
                f"(perfect separation)", trace)
    if np.max(np.abs(g)) < score_tol and rel_step < step_tol:
        return NewtonResult(b, val, g, h, max_iter, trace)
    raise NonConvergenceError(f"{label}: no convergence in {max_iter} iterations", trace)


# ---------------------------------------------------------------------------
# Logit

@dataclass
class LogitFit:
    coef: np.ndarray
    fitted: np.ndarray
    subsample_mask: np.ndarray
    converged: bool
    iterations: int
    neg_hessian: np.ndarray
    degenerate: bool = False
    trace: list = field(default_factory=list, repr=False)

    def predict(self, x) -> np.ndarray:
        return expit(np.asarray(x) @ self.coef)


def logit_loglik(coef, y, x, weights=None):
    """Mean Bernoulli log likelihood over the rows given, with score and negative Hessian."""
    eta = x @ coef
    p = expit(eta)
    w = np.ones(len(y)) if weights is None else weights
    m = len(y)
    val = float(np.sum(w * (y * eta - np.logaddexp(0.0, eta)))) / m
    score = x.T @ (w * (y - p)) / m
    neg_h = (x * (w * p * (1.0 - p))[:, None]).T @ x / m
    return val, score, neg_h


def fit_logit(y, data, mask=None, weights=None, start=None, label="logit") -> LogitFit:
    """Maximum-likelihood logit on the masked rows; fitted values for every row.

    ``weights`` turns the fit into a weighted likelihood (used by the weak-MAR
    estimator).
    """
    x, _ = _design(data)
    y = np.asarray(y, dtype=float)
    n, k = x.shape
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, dtype=bool)
    ys, xs = y[mask], x[mask]
    ws = None if weights is None else np.asarray(weights, dtype=float)[mask]
    if ys.size < k:
        raise DegenerateOutcomeError(f"{label}: {ys.size} rows for {k} coefficients")
    if np.all(ys == ys[0]):
        raise DegenerateOutcomeError(f"{label}: outcome takes a single value ({ys[0]:g}) on the subsample")
    res = newton_maximize(lambda b: logit_loglik(b, ys, xs, ws),
                          np.zeros(k) if start is None else start, label=label)
    return LogitFit(res.coef, expit(x @ res.coef), mask, True, res.iterations,
                    res.neg_hessian, trace=res.trace)


def constant_fit(n, k, mask, value=1.0 - PROB_CLAMP) -> LogitFit:
    """Stand-in for a probability model that is identically ``value``."""
    coef = np.zeros(k)
    coef[0] = np.log(value / (1.0 - value))
    return LogitFit(coef, np.full(n, value), np.asarray(mask, bool), True, 0,
                    np.zeros((k, k)), degenerate=True)


# ---------------------------------------------------------------------------
# Least squares

@dataclass
class OlsFit:
    coef: np.ndarray
    fitted: np.ndarray
    subsample_mask: np.ndarray
    gram: np.ndarray
    dropped: tuple = ()


def _pivoted_rank(xs):
    # Unit-norm columns make the rank decision independent of column scale.
    norms = np.linalg.norm(xs, axis=0)
    scaled = xs / np.where(norms > 0, norms, 1.0)
    _, r, piv = spl.qr(scaled, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        return 0, piv
    rank = int(np.sum(diag > RANK_TOL * diag[0]))
    return rank, piv


def fit_ols(y, data, mask=None, drop_collinear=False, names=None, label="ols") -> OlsFit:
    """Least squares on the masked rows; fitted values for every row.

    Rank is judged by pivoted QR. By default a rank-deficient design raises a
    :class:`SingularityError` naming the offending columns; with
    ``drop_collinear`` those columns get coefficient zero instead.
    """
    x, default_names = _design(data)
    names = tuple(names) if names is not None else default_names
    y = np.asarray(y, dtype=float)
    n, k = x.shape
    mask = np.ones(n, bool) if mask is None else np.asarray(mask, dtype=bool)
    xs, ys = x[mask], y[mask]
    if xs.shape[0] == 0:
        raise EmptyCellError(f"{label}: empty subsample")
    rank, piv = _pivoted_rank(xs)
    keep = np.sort(piv[:rank])
    bad = np.sort(piv[rank:])
    if bad.size and not drop_collinear:
        raise SingularityError(f"{label}: rank-deficient design, collinear columns "
                               f"{[names[j] for j in bad]}", [names[j] for j in bad])
    coef = np.zeros(k)
    sol, *_ = spl.lstsq(xs[:, keep], ys, lapack_driver="gelsy")
    coef[keep] = sol
    gram = xs.T @ xs / xs.shape[0]
    return OlsFit(coef, x @ coef, mask, gram, tuple(names[j] for j in bad))


# ---------------------------------------------------------------------------
# Nuisance set

@dataclass
class NuisanceSet:
    """All working-model fits for one estimand.

    ``pi_d2`` models P(D2 = 1 | X); :meth:`p_d2` converts it to P(D2 = d2 | X).
    """

    phi_d2: LogitFit
    phi_d2p: LogitFit
    pi_d1gd2: LogitFit
    pi_d1pgd2p: LogitFit
    pi_d2: LogitFit
    mu_d: OlsFit | None
    mu_dp: OlsFit | None
    spec: EstimandSpec

    def p_d2(self, d2) -> np.ndarray:
        return self.pi_d2.fitted if d2 == 1 else 1.0 - self.pi_d2.fitted

    @property
    def pi_d(self) -> np.ndarray:
        return self.pi_d1gd2.fitted * self.p_d2(self.spec.d.d2)

    @property
    def pi_dp(self) -> np.ndarray:
        return self.pi_d1pgd2p.fitted * self.p_d2(self.spec.d_prime.d2)

    @property
    def phi_fixed(self) -> bool:
        return self.phi_d2.degenerate and self.phi_d2p.degenerate

    def iterations(self) -> dict:
        out = {}
        for name in ("phi_d2", "phi_d2p", "pi_d1gd2", "pi_d1pgd2p", "pi_d2"):
            out[name] = getattr(self, name).iterations
        return out


def _annotate(exc: NumericalError, name: str):
    msg = exc.args[0] if exc.args else ""
    if not msg.startswith(f"{name}:"):
        exc.args = (f"{name}: {msg}",) + tuple(exc.args[1:])
    exc.nuisance = name
    return exc


def _check_cell(mask, label, need=1):
    c = int(np.sum(mask))
    if c < need:
        raise EmptyCellError(f"precondition failed: cell {label} has {c} record(s), needs {need}", label)


def _missingness_fit(sample, d2, label):
    grp = sample.d2 == d2
    _check_cell(grp, f"D2={d2}")
    _check_cell(grp & (sample.s == 1), f"S=1, D2={d2}")
    if np.all(sample.s[grp] == 1):
        return constant_fit(sample.n, sample.k, grp)
    return fit_logit(sample.s, sample, grp, label=label)


def fit_nuisances(sample: PanelSample, spec: EstimandSpec, fix_phi: bool = False,
                  outcome: bool = True) -> NuisanceSet:
    """Fit the seven working models of the robust estimator.

    ``fix_phi`` replaces both missingness models by the constant 1 (up to the
    clamp), as the complete-case estimators require.
    """
    d, dp = spec.d, spec.d_prime
    n, k = sample.n, sample.k
    obs = sample.s == 1
    cells = {
        f"S=1, D=({d.d1},{d.d2})": sample.path_indicator(d) == 1,
        f"S=1, D=({dp.d1},{dp.d2})": sample.path_indicator(dp) == 1,
    }
    for lab, m in cells.items():
        _check_cell(m, lab, k if outcome else 1)
    for v in (0, 1):
        _check_cell(sample.d2 == v, f"D2={v}")

    def run(name, fn):
        try:
            return fn()
        except NumericalError as exc:
            raise _annotate(exc, name)

    if fix_phi:
        phi_a = constant_fit(n, k, sample.d2 == d.d2)
        phi_b = constant_fit(n, k, sample.d2 == dp.d2)
    else:
        phi_a = run("phi_d2", lambda: _missingness_fit(sample, d.d2, "phi_d2"))
        phi_b = run("phi_d2p", lambda: _missingness_fit(sample, dp.d2, "phi_d2p"))
    ga = obs & (sample.d2 == d.d2)
    gb = obs & (sample.d2 == dp.d2)
    pi_a = run("pi_d1gd2", lambda: fit_logit(sample.d1_indicator(d.d1), sample, ga, label="pi_d1gd2"))
    pi_b = run("pi_d1pgd2p", lambda: fit_logit(sample.d1_indicator(dp.d1), sample, gb, label="pi_d1pgd2p"))
    pi_2 = run("pi_d2", lambda: fit_logit(sample.d2, sample, None, label="pi_d2"))
    mu_d = mu_dp = None
    if outcome:
        mu_d = run("mu_d", lambda: fit_ols(sample.delta_y, sample, cells[f"S=1, D=({d.d1},{d.d2})"], label="mu_d"))
        mu_dp = run("mu_dp", lambda: fit_ols(sample.delta_y, sample, cells[f"S=1, D=({dp.d1},{dp.d2})"], label="mu_dp"))
    return NuisanceSet(phi_a, phi_b, pi_a, pi_b, pi_2, mu_d, mu_dp, spec)


# ---------------------------------------------------------------------------
# Influence-function ingredients

@dataclass
class InfluenceIngredients:
    b_beta_d: np.ndarray
    b_beta_dp: np.ndarray
    b_gamma_d1gd2: np.ndarray
    b_gamma_d1pgd2p: np.ndarray
    b_gamma_d2: np.ndarray
    b_delta_d2: np.ndarray
    b_delta_d2p: np.ndarray


def _solve_bread(bread, rows, label):
    try:
        inv = spl.solve(bread, np.eye(bread.shape[0]), assume_a="sym")
    except (np.linalg.LinAlgError, spl.LinAlgError) as exc:
        raise SingularityError(f"{label}: singular bread matrix") from exc
    if not np.all(np.isfinite(inv)):
        raise SingularityError(f"{label}: singular bread matrix")
    return rows @ inv.T


def logit_influence(fit: LogitFit, y, x, weights=None, label="logit") -> np.ndarray:
    """Per-observation influence of a logit coefficient vector (n x k).

    Expectations are sample means over all n rows with the subsample indicator
    inside.
    """
    if fit.degenerate:
        return np.zeros_like(x)
    m = fit.subsample_mask.astype(float)
    if weights is not None:
        m = m * weights
    p = fit.fitted
    bread = (x * (m * p * (1.0 - p))[:, None]).T @ x / x.shape[0]
    return _solve_bread(bread, x * (m * (np.asarray(y, float) - p))[:, None], label)


def ols_influence(fit: OlsFit, y, x, label="ols") -> np.ndarray:
    m = fit.subsample_mask.astype(float)
    bread = (x * m[:, None]).T @ x / x.shape[0]
    return _solve_bread(bread, x * (m * (np.asarray(y, float) - fit.fitted))[:, None], label)


def influence_ingredients(sample: PanelSample, nus: NuisanceSet) -> InfluenceIngredients:
    x = sample.x
    d, dp = nus.spec.d, nus.spec.d_prime
    zeros = np.zeros_like(x)
    b_bd = ols_influence(nus.mu_d, sample.delta_y, x, "mu_d") if nus.mu_d else zeros
    b_bdp = ols_influence(nus.mu_dp, sample.delta_y, x, "mu_dp") if nus.mu_dp else zeros
    return InfluenceIngredients(
        b_beta_d=b_bd,
        b_beta_dp=b_bdp,
        b_gamma_d1gd2=logit_influence(nus.pi_d1gd2, sample.d1_indicator(d.d1), x, label="pi_d1gd2"),
        b_gamma_d1pgd2p=logit_influence(nus.pi_d1pgd2p, sample.d1_indicator(dp.d1), x, label="pi_d1pgd2p"),
        b_gamma_d2=logit_influence(nus.pi_d2, sample.d2, x, label="pi_d2"),
        b_delta_d2=logit_influence(nus.phi_d2, sample.s, x, label="phi_d2"),
        b_delta_d2p=logit_influence(nus.phi_d2p, sample.s, x, label="phi_d2p"),
    )
