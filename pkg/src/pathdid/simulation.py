"""Simulation design, ground-truth PDATTs and Monte Carlo experiments."""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np
from scipy.special import expit

from .errors import NumericalError, PathDidError, ValidationError
from .estimators import estimate_many
from .inference import TrueNuisance, efficient_influence
from .panel_data import NEVER_TREATED, TARGET_PATHS, PanelSample, TreatmentPath

# Rows: intercept, X1..X4. Columns in PARAM_COLUMNS order.
PARAM_COLUMNS = ("gamma_1", "gamma_1|1", "gamma_1|0", "beta_11", "beta_10", "beta_01",
                 "beta_00", "delta_1", "delta_0")
DEFAULT_PARAMS = (
    (0.00, 0.00, 0.00, 1.50, 1.00, 1.00, 0.00, 0.00, 0.00),
    (-0.50, -0.50, 0.50, -0.25, -0.25, 0.25, 0.25, -0.50, 0.50),
    (-0.50, -0.50, 0.50, 0.25, -0.25, 0.25, 0.25, -0.50, 0.50),
    (-0.50, 0.50, -0.50, 0.25, 0.25, -0.25, 0.25, 0.50, 0.50),
    (-0.50, 0.50, -0.50, 0.25, 0.25, -0.25, 0.25, 0.50, -0.50),
)

# Letters name the working models that are misspecified.
SCENARIOS = {
    "none": dict(eta_p=1.0, eta_m=1.0, eta_o=1.0),
    "M": dict(eta_p=1.0, eta_m=0.0, eta_o=1.0),
    "P": dict(eta_p=0.0, eta_m=1.0, eta_o=1.0),
    "O": dict(eta_p=1.0, eta_m=1.0, eta_o=0.0),
    "M-P": dict(eta_p=0.0, eta_m=0.0, eta_o=1.0),
    "M-O": dict(eta_p=1.0, eta_m=0.0, eta_o=0.0),
    "P-O": dict(eta_p=0.0, eta_m=1.0, eta_o=0.0),
    "all": dict(eta_p=0.0, eta_m=0.0, eta_o=0.0),
}

TRUTH_DRAWS = 10_000_000
TRUTH_CHUNK = 1_000_000
TRUTH_SEED = 20240917


@dataclass(frozen=True)
class DgpConfig:
    n: int = 10_000
    eta_p: float = 1.0
    eta_m: float = 1.0
    eta_o: float = 1.0
    c: float = 0.0
    params: tuple = DEFAULT_PARAMS
    seed: int = 0

    def __post_init__(self):
        for name in ("eta_p", "eta_m", "eta_o"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"{name} must lie in [0,1], got {v}")
        p = tuple(tuple(float(v) for v in row) for row in self.params)
        if len(p) != 5 or any(len(row) != 9 for row in p):
            raise ValidationError("params must be a 5 x 9 block")
        object.__setattr__(self, "params", p)
        if self.n < 1:
            raise ValidationError("n must be positive")

    @classmethod
    def scenario(cls, name: str, **kw) -> "DgpConfig":
        key = {k.lower(): k for k in SCENARIOS}.get(name.lower().replace(",", "-").replace(" ", ""))
        if key is None:
            raise ValidationError(f"unknown scenario {name!r}; expected one of {list(SCENARIOS)}")
        return cls(**SCENARIOS[key], **kw)

    def column(self, name: str) -> np.ndarray:
        j = PARAM_COLUMNS.index(name)
        return np.array([row[j] for row in self.params])

    def with_intercept_shift(self, column: str, value: float) -> "DgpConfig":
        j = PARAM_COLUMNS.index(column)
        rows = [list(r) for r in self.params]
        rows[0][j] = value
        return replace(self, params=tuple(tuple(r) for r in rows))


def replication_rng(seed: int, r: int) -> np.random.Generator:
    """Stream for replication ``r``: a pure function of ``(seed, r)``."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(r,))))


def kang_schafer_raw(x4: np.ndarray) -> np.ndarray:
    x1, x2, x3, x4_ = (x4[:, j] for j in range(4))
    return np.column_stack([
        np.exp(0.5 * x1),
        10.0 + x2 / (1.0 + np.exp(x1)),
        (0.6 + x1 * x3 / 25.0) ** 3,
        (20.0 + x2 + x4_) ** 2,
    ])


def kang_schafer(x4: np.ndarray, moments=None) -> np.ndarray:
    """Nonlinear transforms of four covariates, standardized to mean 0 and variance 1.

    Standardization uses the sample's own moments unless ``moments=(mean, sd)``
    is supplied.
    """
    z = kang_schafer_raw(np.asarray(x4, dtype=float))
    mean, sd = (z.mean(axis=0), z.std(axis=0)) if moments is None else moments
    return (z - mean) / sd


@dataclass
class DgpDraw:
    sample: PanelSample
    truth: TrueNuisance
    d1_full: np.ndarray = field(repr=False)


def _latent(cfg: DgpConfig, rng, n, moments=None):
    x4 = rng.standard_normal((n, 4))
    u = rng.random((n, 3))
    eps = rng.standard_normal(n)
    ones = np.ones((n, 1))
    x = np.hstack([ones, x4])
    z = np.hstack([ones, kang_schafer(x4, moments)])
    mix = lambda eta: eta * x + (1.0 - eta) * z
    return x, z, mix(cfg.eta_p), mix(cfg.eta_m), mix(cfg.eta_o), u, eps


def _dgp_arrays(cfg: DgpConfig, rng, n, moments=None):
    x, z, xp, xm, xo, u, eps = _latent(cfg, rng, n, moments)
    p2 = expit(xp @ cfg.column("gamma_1"))
    p11 = expit(xp @ cfg.column("gamma_1|1"))
    p10 = expit(xp @ cfg.column("gamma_1|0"))
    d2 = (p2 >= u[:, 0]).astype(float)
    d1 = np.where(d2 == 1, p11 >= u[:, 1], p10 >= u[:, 1]).astype(float)
    delta1 = cfg.column("delta_1").copy()
    delta0 = cfg.column("delta_0").copy()
    delta1[0] += cfg.c
    delta0[0] += cfg.c
    q1 = expit(xm @ delta1)
    q0 = expit(xm @ delta0)
    s = np.where(d2 == 1, q1 >= u[:, 2], q0 >= u[:, 2]).astype(float)
    m = {TreatmentPath(a, b): xo @ cfg.column(f"beta_{a}{b}") for a in (0, 1) for b in (0, 1)}
    mean = sum(((d1 == a) & (d2 == b)) * m[TreatmentPath(a, b)] for a in (0, 1) for b in (0, 1))
    dy = mean + eps
    return dict(x=x, xo=xo, d1=d1, d2=d2, s=s, dy=dy, m=m, q={1: q1, 0: q0}, p2=p2,
                p_cond={(1, 1): p11, (0, 1): 1.0 - p11, (1, 0): p10, (0, 0): 1.0 - p10})


def generate_draw(cfg: DgpConfig, rng) -> DgpDraw:
    a = _dgp_arrays(cfg, rng, cfg.n)
    sample = PanelSample.from_arrays(a["dy"], a["s"], a["d1"], a["d2"], a["x"],
                                     ("const", "x1", "x2", "x3", "x4"))
    truth = TrueNuisance(m=a["m"], q=a["q"], p_d2=a["p2"], p_cond=a["p_cond"])
    return DgpDraw(sample, truth, a["d1"])


def generate_sample(cfg: DgpConfig, rng) -> PanelSample:
    """One draw from the design. The covariates handed over are always X, never Z."""
    return generate_draw(cfg, rng).sample


# ---------------------------------------------------------------------------
# Ground truth

@lru_cache(maxsize=None)
def _truth_moments(eta_p: float, gammas: tuple, draws: int, seed: int):
    """Conditional means of X and of the raw transforms within each treatment path."""
    chunks = -(-draws // TRUTH_CHUNK)
    sizes = [min(TRUTH_CHUNK, draws - c * TRUTH_CHUNK) for c in range(chunks)]
    streams = [np.random.SeedSequence(seed, spawn_key=(c,)) for c in range(chunks)]

    def chunk_x(c):
        rng = np.random.Generator(np.random.Philox(streams[c]))
        x4 = rng.standard_normal((sizes[c], 4))
        return rng, x4

    # population moments of the transforms
    tot = np.zeros(4)
    tot2 = np.zeros(4)
    for c in range(chunks):
        _, x4 = chunk_x(c)
        zr = kang_schafer_raw(x4)
        tot += zr.sum(axis=0)
        tot2 += (zr ** 2).sum(axis=0)
    mean = tot / draws
    sd = np.sqrt(tot2 / draws - mean ** 2)

    g1, g11, g10 = (np.array(g) for g in gammas)
    sums = {p: np.zeros(5) for p in TARGET_PATHS + (NEVER_TREATED,)}
    zsums = {p: np.zeros(5) for p in sums}
    counts = {p: 0 for p in sums}
    for c in range(chunks):
        rng, x4 = chunk_x(c)
        u = rng.random((sizes[c], 2))
        ones = np.ones((sizes[c], 1))
        x = np.hstack([ones, x4])
        z = np.hstack([ones, (kang_schafer_raw(x4) - mean) / sd])
        xp = eta_p * x + (1.0 - eta_p) * z
        d2 = expit(xp @ g1) >= u[:, 0]
        d1 = np.where(d2, expit(xp @ g11) >= u[:, 1], expit(xp @ g10) >= u[:, 1])
        for p in sums:
            sel = (d1 == p.d1) & (d2 == p.d2)
            sums[p] += x[sel].sum(axis=0)
            zsums[p] += z[sel].sum(axis=0)
            counts[p] += int(sel.sum())
    return {p: (sums[p] / counts[p], zsums[p] / counts[p]) for p in sums}


def true_pdatt(cfg: DgpConfig, draws: int = TRUTH_DRAWS, seed: int = TRUTH_SEED) -> dict:
    """PDATTs E[X_o (beta_d - beta_00) | D = d] by a large fixed-seed plug-in.

    The conditional covariate means depend only on the propensity design, so
    they are cached and reused across outcome coefficients, missingness
    settings and sample sizes.
    """
    gammas = tuple(tuple(cfg.column(g)) for g in ("gamma_1", "gamma_1|1", "gamma_1|0"))
    mom = _truth_moments(float(cfg.eta_p), gammas, int(draws), int(seed))
    out = {}
    b00 = cfg.column("beta_00")
    for p in TARGET_PATHS:
        mx, mz = mom[p]
        xo_mean = cfg.eta_o * mx + (1.0 - cfg.eta_o) * mz
        out[p] = float(xo_mean @ (cfg.column(f"beta_{p.d1}{p.d2}") - b00))
    return out


# ---------------------------------------------------------------------------
# Monte Carlo

@dataclass
class McCell:
    method: str
    pdatt: str
    truth: float
    bias: float
    sd: float
    mean_se: float
    coverage: float
    size: float
    mean_estimate: float
    n_var: float
    reps_ok: int
    reps_failed: int


@dataclass
class McResult:
    cells: dict
    reps: int
    truths: dict
    failures: int = 0
    estimates: dict = field(default_factory=dict, repr=False)
    ses: dict = field(default_factory=dict, repr=False)

    def cell(self, method: str, path) -> McCell:
        return self.cells[(method, TreatmentPath.parse(path).label)]

    def rows(self, scenario: str = "") -> list[dict]:
        out = []
        for (method, pdatt), c in sorted(self.cells.items()):
            out.append({"scenario": scenario, "estimator": method, "pdatt": f"{pdatt}-00",
                        "truth": c.truth, "bias": c.bias, "sd": c.sd, "mean_se": c.mean_se,
                        "coverage": c.coverage, "size": c.size, "mean_estimate": c.mean_estimate,
                        "n_var": c.n_var, "reps_ok": c.reps_ok, "reps_failed": c.reps_failed})
        return out


def _one_replication(args):
    cfg, r, methods, paths, level, with_seb = args
    draw = generate_draw(cfg, replication_rng(cfg.seed, r))
    out = {}
    for p in paths:
        spec_label = p.label
        try:
            res = estimate_many(draw.sample, [p], methods)
            for e in res:
                out[(e.method, spec_label)] = (e.tau_hat, e.se)
        except (NumericalError, PathDidError):
            for m in methods:
                out[(m, spec_label)] = (np.nan, np.nan)
        if with_seb:
            f, _ = efficient_influence(draw.sample, draw.truth, p)
            out[("SEB", spec_label)] = (np.nan, float(np.sqrt(np.mean(f * f) / cfg.n)))
    return r, out


def _pool_map(fn, jobs, threads):
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * threads))))


def _aggregate(collected, reps, truths, n, level) -> McResult:
    from statistics import NormalDist

    z = NormalDist().inv_cdf(0.5 + level / 2.0)
    keys = sorted({k for _, out in collected for k in out})
    cells, ests, ses = {}, {}, {}
    collected = sorted(collected, key=lambda t: t[0])
    for key in keys:
        method, label = key
        vals = np.array([out.get(key, (np.nan, np.nan)) for _, out in collected], dtype=float)
        est, se = vals[:, 0], vals[:, 1]
        truth = truths[TreatmentPath.parse(label)]
        ests[key], ses[key] = est, se
        if method == "SEB":
            ok = np.isfinite(se)
            nvar = float(np.mean(n * se[ok] ** 2)) if ok.any() else np.nan
            cells[key] = McCell(method, label, truth, np.nan, np.nan, np.nan, np.nan, np.nan,
                                np.nan, nvar, int(ok.sum()), int((~ok).sum()))
            continue
        ok = np.isfinite(est) & np.isfinite(se)
        e, s = est[ok], se[ok]
        if e.size == 0:
            cells[key] = McCell(method, label, truth, *([np.nan] * 7), 0, int((~ok).sum()))
            continue
        cover = float(np.mean(np.abs(e - truth) <= z * s))
        cells[key] = McCell(method, label, truth, float(e.mean() - truth),
                            float(e.std(ddof=1)) if e.size > 1 else 0.0, float(s.mean()),
                            cover, 1.0 - cover, float(e.mean()), float(np.mean(n * s ** 2)),
                            int(ok.sum()), int((~ok).sum()))
    failures = int(max((c.reps_failed for c in cells.values()), default=0))
    return McResult(cells, reps, {p.label: v for p, v in truths.items()}, failures, ests, ses)


def run_monte_carlo(cfg: DgpConfig, reps: int, estimators=("R", "DR", "IPW", "OR"),
                    specs=TARGET_PATHS, level: float = 0.95, threads: int | None = None,
                    with_seb: bool = False) -> McResult:
    """Replicate the design ``reps`` times; replication r uses stream (cfg.seed, r)."""
    if reps < 1:
        raise ValidationError("reps must be at least 1")
    paths = tuple(TreatmentPath.parse(p) for p in specs)
    truths = true_pdatt(cfg)
    jobs = [(cfg, r, tuple(estimators), paths, level, with_seb) for r in range(reps)]
    collected = _pool_map(_one_replication, jobs, threads)
    return _aggregate(collected, reps, truths, cfg.n, level)


# ---------------------------------------------------------------------------
# Sweeps and power

def _sweep_point(args):
    cfg, x_value, methods, paths, seed_key = args
    draw = generate_draw(cfg, replication_rng(cfg.seed, seed_key))
    truths = true_pdatt(cfg)
    rows = []
    miss = float(1.0 - draw.sample.s.mean())
    for p in paths:
        try:
            res = estimate_many(draw.sample, [p], methods, with_se=False)
            vals = {e.method: e.tau_hat for e in res}
        except (NumericalError, PathDidError):
            vals = {m: np.nan for m in methods}
        for m in methods:
            rows.append({"x": x_value, "estimator": m, "pdatt": f"{p.label}-00",
                         "bias": vals[m] - truths[p], "estimate": vals[m], "truth": truths[p],
                         "missing_share": miss})
    return rows


def _sweep(cfgs, xs, methods, specs, threads, scenario):
    paths = tuple(TreatmentPath.parse(p) for p in specs)
    for c in cfgs:
        true_pdatt(c)
    jobs = [(c, x, tuple(methods), paths, j) for j, (c, x) in enumerate(zip(cfgs, xs))]
    out = []
    for rows in _pool_map(_sweep_point, jobs, threads):
        for row in rows:
            out.append({"scenario": scenario, **row})
    return out


def sweep_missingness(c_grid, cfg: DgpConfig, n_large: int, methods=("R", "DR", "CC-DR"),
                      specs=TARGET_PATHS, threads=None) -> list[dict]:
    """One large draw per missingness intercept ``c``; bias against the truth."""
    cfgs = [replace(cfg, c=float(c), n=int(n_large)) for c in c_grid]
    return _sweep(cfgs, [float(c) for c in c_grid], methods, specs, threads, "c")


def sweep_misspecification(eta_m_grid, cfg: DgpConfig, n_large: int, methods=("R", "DR", "CC-DR"),
                           specs=TARGET_PATHS, threads=None) -> list[dict]:
    """One large draw per missingness-model mixing weight ``eta_m``."""
    cfgs = [replace(cfg, eta_m=float(e), n=int(n_large)) for e in eta_m_grid]
    return _sweep(cfgs, [float(e) for e in eta_m_grid], methods, specs, threads, "eta_m")


def bisect(fn, target, lo, hi, tol=1e-10, max_iter=200):
    """Root of the increasing function ``fn(x) - target`` on ``[lo, hi]``."""
    flo, fhi = fn(lo) - target, fn(hi) - target
    if flo > 0 or fhi < 0:
        raise ValidationError(f"target {target} not reachable on [{lo}, {hi}]")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        fm = fn(mid) - target
        if abs(fm) <= tol or hi - lo <= tol:
            return mid
        if fm < 0:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def config_for_target(cfg: DgpConfig, tau_target: float, bracket=(-100.0, 100.0)) -> DgpConfig:
    """Shift the intercept of beta_11 so that the (1,1) PDATT equals ``tau_target``."""
    p11 = TreatmentPath(1, 1)
    fn = lambda a: true_pdatt(cfg.with_intercept_shift("beta_11", a))[p11]
    a = bisect(fn, tau_target, *bracket)
    return cfg.with_intercept_shift("beta_11", a)


@dataclass
class PowerCurve:
    grid: list
    rejection: dict
    reps: int

    def rows(self, scenario="") -> list[dict]:
        return [{"scenario": scenario, "estimator": m, "x": t, "y": r}
                for m, vals in self.rejection.items() for t, r in zip(self.grid, vals)]


def power_curve(cfg: DgpConfig, tau_grid, reps: int, estimators=("R", "DR"), level=0.95,
                threads=None) -> PowerCurve:
    """Rejection frequency of H0: tau_11 = 0 as the true (1,1) PDATT moves along the grid."""
    from statistics import NormalDist

    grid = [float(t) for t in tau_grid]
    if not grid:
        raise ValidationError("tau grid is empty")
    z = NormalDist().inv_cdf(0.5 + level / 2.0)
    rej = {m: [] for m in estimators}
    for t in grid:
        c = config_for_target(cfg, t)
        mc_jobs = [(c, r, tuple(estimators), (TreatmentPath(1, 1),), level, False) for r in range(reps)]
        collected = sorted(_pool_map(_one_replication, mc_jobs, threads), key=lambda q: q[0])
        for m in estimators:
            vals = np.array([out[(m, "11")] for _, out in collected], dtype=float)
            ok = np.isfinite(vals).all(axis=1)
            rej[m].append(float(np.mean(np.abs(vals[ok, 0]) > z * vals[ok, 1])))
    return PowerCurve(grid, rej, reps)
