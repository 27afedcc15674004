"""Simulation study: eigenimage construction, data generation, censoring calibration and metrics.

Images are ``X_i = sum_k k^{-1/4} xi_ik phi_k`` over nine orthonormal
eigenimages built from blocky {0, 1} patterns. Event times follow a
Gompertz-form hazard ``A_i exp(alpha beta1 t)`` whose multiplier ``A_i``
collects the baseline longitudinal trajectory, the random intercept and the
image effects; censoring is uniform on ``(0, c0)``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.optimize import brentq

from .funcdata import (FjmDataset, FunctionalGrid, FunctionOnGrid, ImageMatrix, SubjectData,
                       inner_product)
from .jointmodel import CumHaz, EmError, FjmParams
from .plscore import orthonormalize

logger = logging.getLogger(__name__)

N_EIGEN = 9
MACRO = 12
RESULT_COLUMNS = ("rep", "estimator", "scenario", "n", "p0", "p1", "mse_b0", "mse_b1", "cindex",
                  "converged", "seconds")
ESTIMATORS = ("fpls", "fpca", "flcrm", "r1", "r2", "oracle")
CALIBRATION_SEED = 20240601


@dataclass(frozen=True)
class TrueParams:
    beta0: float = 0.7
    beta1: float = 1.0
    beta2: float = 2.0
    alpha: float = 2.0
    gamma: float = 2.0
    sigma_eps: float = 0.4

    def __post_init__(self):
        if not self.sigma_eps > 0:
            raise ValueError("sigma_eps must be positive")


@dataclass(frozen=True)
class ScenarioSpec:
    """One simulation setting; ``c0=None`` means "calibrate to ``target_censoring``"."""

    scenario: str = "one"
    n: int = 200
    dims: tuple[int, ...] = (60, 60)
    target_censoring: float = 0.6
    true_params: TrueParams = field(default_factory=TrueParams)
    b0_weights: dict = field(default_factory=dict)
    b1_weights: dict = field(default_factory=dict)
    seed: int = 0
    c0: float | None = None
    n_visits: int = 3
    eigen_seed: int | None = None

    def __post_init__(self):
        if self.scenario not in ("one", "two", "custom"):
            raise ValueError("scenario must be 'one', 'two' or 'custom'")
        if self.n < 1:
            raise ValueError("n must be positive")
        if not 0 < self.target_censoring < 1:
            raise ValueError("target_censoring must lie in (0, 1)")
        for w in (self.b0_weights, self.b1_weights):
            if any(int(k) not in range(1, N_EIGEN + 1) for k in w):
                raise ValueError(f"weights must reference eigenimages 1..{N_EIGEN}")
        if self.c0 is not None and not self.c0 > 0:
            raise ValueError("c0 must be positive")
        if self.n_visits < 1:
            raise ValueError("n_visits must be positive")
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))
        object.__setattr__(self, "b0_weights", {int(k): float(v) for k, v in self.b0_weights.items()})
        object.__setattr__(self, "b1_weights", {int(k): float(v) for k, v in self.b1_weights.items()})

    def weight_vectors(self) -> tuple[np.ndarray, np.ndarray]:
        w0, w1 = np.zeros(N_EIGEN), np.zeros(N_EIGEN)
        for k, v in self.b0_weights.items():
            w0[k - 1] = v
        for k, v in self.b1_weights.items():
            w1[k - 1] = v
        return w0, w1


def scenario(name: str, n: int = 200, dims: Sequence[int] = (60, 60), seed: int = 0,
             **kwargs) -> ScenarioSpec:
    """Standard settings: ``one`` has ``b0 = b1`` on the leading eigenimages, ``two`` puts ``b0`` on the trailing ones."""
    if name == "one":
        w = {k: k ** -1.5 for k in range(1, 6)}
        return ScenarioSpec("one", n, tuple(dims), b0_weights=w, b1_weights=dict(w), seed=seed, **kwargs)
    if name == "two":
        return ScenarioSpec("two", n, tuple(dims), b0_weights={k: (k - 4) ** -0.5 for k in range(5, 10)},
                            b1_weights={k: k ** -0.5 for k in range(1, 6)}, seed=seed, **kwargs)
    raise ValueError(f"unknown scenario {name!r}; expected 'one' or 'two'")


# ---------------------------------------------------------------------------
# Eigenimages
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EigenimageSet:
    grid: FunctionalGrid
    matrix: np.ndarray          # (9, d), orthonormal rows under the grid inner product
    construction: str = "blocky_patterns"

    @property
    def functions(self) -> tuple[FunctionOnGrid, ...]:
        return tuple(FunctionOnGrid(self.grid, row) for row in self.matrix)

    def combine(self, weights) -> FunctionOnGrid:
        return FunctionOnGrid(self.grid, np.asarray(weights, dtype=np.float64) @ self.matrix)


def _macro_patterns() -> np.ndarray:
    """Nine {0, 1} patterns on a 12 x 12 lattice: quadrants, centre, bands, checker, frame."""
    i, j = np.meshgrid(np.arange(MACRO), np.arange(MACRO), indexing="ij")
    half = MACRO // 2
    pats = [
        (i < half) & (j < half),
        (i < half) & (j >= half),
        (i >= half) & (j < half),
        (i >= half) & (j >= half),
        (i >= 3) & (i < 9) & (j >= 3) & (j < 9),
        (j >= 4) & (j < 8),
        (i >= 4) & (i < 8),
        ((i // 3 + j // 3) % 2) == 0,
        (i < 2) | (i >= 10) | (j < 2) | (j >= 10),
    ]
    return np.array(pats, dtype=np.float64)


def make_eigenimages(dims: Sequence[int], seed: int | None = None) -> EigenimageSet:
    """Nine orthonormal eigenimages on a 2-D grid of extents ``dims``.

    Each pattern lives on a 12 x 12 macro lattice and is sampled at pixel
    centres, so grids whose extents are multiples of 12 refine exactly. A
    non-``None`` ``seed`` shuffles the pattern order.
    """
    dims = tuple(int(v) for v in dims)
    if len(dims) != 2 or min(dims) < 3:
        raise ValueError(f"eigenimages need a 2-D grid with extents >= 3, got {dims}")
    grid = FunctionalGrid(dims)
    rows = (np.arange(dims[0]) + 0.5) * MACRO // dims[0]
    cols = (np.arange(dims[1]) + 0.5) * MACRO // dims[1]
    rows, cols = rows.astype(int), cols.astype(int)
    pats = _macro_patterns()
    if seed is not None:
        pats = pats[np.random.default_rng(seed).permutation(N_EIGEN)]
    raw = pats[:, rows][:, :, cols].reshape(N_EIGEN, -1)
    basis = orthonormalize(raw, grid.cell_measure, tol=1e-8)
    if basis.shape[0] != N_EIGEN:
        raise ValueError(f"grid {dims} is too coarse: patterns are linearly dependent")
    return EigenimageSet(grid, basis)


# ---------------------------------------------------------------------------
# Data generation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Truth:
    """Generating parameters and latent quantities of a simulated dataset."""

    b0: FunctionOnGrid
    b1: FunctionOnGrid
    params: TrueParams
    c0: float
    event_time: np.ndarray
    censor_time: np.ndarray
    u: np.ndarray

    def as_fjm_params(self) -> FjmParams:
        p = self.params
        return FjmParams(p.beta0, np.array([p.beta1, p.beta2]), np.array([p.gamma]), p.alpha,
                         np.eye(1), p.sigma_eps ** 2, self.b0, self.b1, CumHaz.empty())

    def to_dict(self) -> dict:
        p = self.params
        return {"beta0": p.beta0, "beta1": p.beta1, "beta2": p.beta2, "alpha": p.alpha,
                "gamma": p.gamma, "sigma_eps": p.sigma_eps, "c0": self.c0,
                "b0_sq_norm": inner_product(self.b0, self.b0),
                "b1_sq_norm": inner_product(self.b1, self.b1)}


def sample_event_times(A: np.ndarray, rate: float, U: np.ndarray) -> np.ndarray:
    """Inverse-CDF draws for the hazard ``A exp(rate t)``.

    The survival function is ``exp(-A (e^{rate t} - 1) / rate)``. For
    ``rate > 0`` the inverse is closed form; otherwise the survival function
    is inverted by bisection (``rate < 0`` allows an infinite event time).
    """
    A = np.asarray(A, dtype=np.float64)
    target = -np.log(U)                       # cumulative hazard to reach
    if rate > 0:
        return np.log1p(rate * target / A) / rate
    if rate == 0:
        return target / A
    limit = -A / rate                          # cumulative hazard as t -> inf
    out = np.full(A.shape, np.inf)
    ok = target < limit
    # cumulative hazard A (1 - e^{rate t}) / (-rate) is increasing in t
    with np.errstate(divide="ignore", invalid="ignore"):
        out[ok] = np.log1p(rate * target[ok] / A[ok]) / rate
    bad = ok & ~np.isfinite(out)
    if bad.any():
        lo, hi = np.zeros(bad.sum()), np.ones(bad.sum())
        a, tg = A[bad], target[bad]
        H = lambda t: a * np.expm1(rate * t) / rate   # noqa: E731
        while np.any(H(hi) < tg):
            hi = np.where(H(hi) < tg, 2 * hi, hi)
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            below = H(mid) < tg
            lo, hi = np.where(below, mid, lo), np.where(below, hi, mid)
        out[bad] = 0.5 * (lo + hi)
    return out


def _latent_draws(spec: ScenarioSpec, rng: np.random.Generator, n: int):
    """Scores, covariate, random intercept and event time without building images."""
    p = spec.true_params
    w0, w1 = spec.weight_vectors()
    xi = rng.standard_normal((n, N_EIGEN))
    coef = xi * np.arange(1, N_EIGEN + 1) ** -0.25
    z = rng.standard_normal(n) * np.abs(xi[:, 1]) / 3.0
    u = rng.standard_normal(n)
    s0, s1 = coef @ w0, coef @ w1
    A = np.exp(p.alpha * (p.beta0 + p.beta2 * z + s0 + u) + s1 + p.gamma * z)
    T = sample_event_times(A, p.alpha * p.beta1, rng.uniform(size=n))
    return coef, z, u, s0, T


def simulate_dataset(spec: ScenarioSpec, eigen: EigenimageSet | None = None,
                     c0: float | None = None, rng: np.random.Generator | None = None
                     ) -> tuple[FjmDataset, Truth]:
    """Draw one dataset; returns it together with the generating truth."""
    c0 = c0 if c0 is not None else spec.c0
    if c0 is None:
        c0 = calibrate_c0(spec, spec.target_censoring)
    eigen = eigen or make_eigenimages(spec.dims, spec.eigen_seed)
    if eigen.grid.dims != spec.dims:
        raise ValueError("eigenimages were built for a different grid")
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    p = spec.true_params
    n = spec.n
    coef, z, u, s0, T = _latent_draws(spec, rng, n)
    C = rng.uniform(0.0, c0, size=n)
    obs = np.minimum(T, C)
    event = T <= C
    visits = np.sort(rng.uniform(size=(n, spec.n_visits)), axis=1) * obs[:, None]
    eps = rng.normal(0.0, p.sigma_eps, size=(n, spec.n_visits))
    y = p.beta0 + p.beta1 * visits + p.beta2 * z[:, None] + s0[:, None] + u[:, None] + eps
    width = len(str(n))
    subjects = tuple(
        SubjectData(f"s{i + 1:0{width}d}", visits[i], y[i], z[i:i + 1], z[i:i + 1],
                    np.ones((spec.n_visits, 1)), float(obs[i]), bool(event[i]))
        for i in range(n))
    images = ImageMatrix(eigen.grid, coef @ eigen.matrix)
    w0, w1 = spec.weight_vectors()
    truth = Truth(eigen.combine(w0), eigen.combine(w1), p, float(c0), T, C, u)
    return FjmDataset(images, subjects), truth


def censoring_rate(T: np.ndarray, c0: float) -> float:
    """Expected share censored under ``C ~ U(0, c0)`` given event times ``T``: ``mean(min(T, c0)) / c0``."""
    return float(np.mean(np.minimum(T, c0)) / c0)


def calibrate_c0(spec: ScenarioSpec, target: float = 0.6, n_pilot: int = 100_000,
                 seed: int = CALIBRATION_SEED) -> float:
    """Censoring bound ``c0`` giving censoring share ``target`` on a pilot sample.

    The pilot draws event times only (no images). Given those draws the
    censoring share is an explicit decreasing function of ``c0``, so it is
    solved to high precision by bracketing root finding.
    """
    if not 0 < target < 1:
        raise ValueError("target must lie in (0, 1)")
    _, _, _, _, T = _latent_draws(spec, np.random.default_rng(seed), n_pilot)

    def gap(log_c0):
        return censoring_rate(T, math.exp(log_c0)) - target

    finite = T[np.isfinite(T)]
    lo = math.log(max(np.quantile(T, 1e-4), 1e-300)) - 5
    hi = math.log((finite.max() if finite.size else 1.0) + 1.0) + 5
    if not (gap(lo) > 0 > gap(hi)):
        raise ValueError(f"censoring share {target} is not attainable for this scenario")
    return math.exp(brentq(gap, lo, hi, xtol=1e-12))


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def mse_functional(estimate: FunctionOnGrid, truth: FunctionOnGrid) -> float:
    diff = estimate - truth
    return inner_product(diff, diff)


def c_index(risk_scores, survival_times, events) -> float:
    """Harrell's concordance index.

    Pair ``(i, j)`` is usable when ``T_i < T_j`` and subject ``i`` had the
    event, or when the times tie and only ``i`` had the event. It counts as
    concordant when ``risk_i > risk_j``; risk ties earn half credit.
    """
    risk = np.asarray(risk_scores, dtype=np.float64)
    T = np.asarray(survival_times, dtype=np.float64)
    ev = np.asarray(events, dtype=bool)
    if not (risk.shape == T.shape == ev.shape) or risk.ndim != 1:
        raise ValueError("risk_scores, survival_times and events must be 1-D of equal length")
    usable = ev[:, None] & ((T[:, None] < T[None, :]) | ((T[:, None] == T[None, :]) & ~ev[None, :]))
    total = int(usable.sum())
    if total == 0:
        raise ValueError("no usable pairs for the concordance index")
    diff = risk[:, None] - risk[None, :]
    score = np.sum(usable & (diff > 0)) + 0.5 * np.sum(usable & (diff == 0))
    return float(score / total)


def posterior_mean_given_marker(params: FjmParams, dataset: FjmDataset) -> np.ndarray:
    """``E[u_i | y_i]`` under the longitudinal submodel alone (Gaussian closed form)."""
    d = dataset.arrays
    b0s = dataset.images.grid.cell_measure * (dataset.images.values @ params.b0.values)
    fixed = (params.beta0 + np.column_stack([d.time, d.z[d.subject]]) @ params.beta1
             + b0s[d.subject])
    e = d.y - fixed
    out = np.zeros((d.n, d.r))
    ends = np.cumsum(d.counts)
    for i, (end, c) in enumerate(zip(ends, d.counts)):
        Q = d.q[end - c:end]
        V = Q @ params.sigma_u @ Q.T + params.sigma_eps2 * np.eye(c)
        out[i] = params.sigma_u @ Q.T @ np.linalg.solve(V, e[end - c:end])
    return out


def risk_scores(params: FjmParams, dataset: FjmDataset, longitudinal: bool = True) -> np.ndarray:
    """Baseline-time hazard log-multiplier per subject.

    Uses ``omega' gamma + int x b1 + alpha (beta0 + z' beta_z + int x b0 + u_i)``
    with ``u_i`` replaced by its posterior mean given the marker values only,
    so no follow-up information enters the score.
    """
    d = dataset.arrays
    cell = dataset.images.grid.cell_measure
    s1 = cell * (dataset.images.values @ params.b1.values)
    risk = d.omega @ params.gamma + s1
    if longitudinal and params.alpha != 0.0:
        s0 = cell * (dataset.images.values @ params.b0.values)
        u = posterior_mean_given_marker(params, dataset)
        m0 = params.beta0 + d.z @ params.beta1[1:] + s0 + u[:, 0]
        risk = risk + params.alpha * m0
    return risk


# ---------------------------------------------------------------------------
# Replications
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BenchSettings:
    """Estimator settings shared by all replications.

    ``p0``/``p1`` fix the basis sizes; a non-empty ``grid`` selects them by
    BIC instead (per replication and estimator).
    """

    p0: int = 3
    p1: int = 3
    grid: tuple[tuple[int, int], ...] = ()
    max_outer_iters: int = 100
    kappa0: float = 1e-6


def _fit_one(name: str, train: FjmDataset, settings: BenchSettings):
    from .fplsdriver import FplsConfig, fit_fpca, fit_fpls, select_p

    variant = {"fpls": "fpls", "fpca": "fpls", "flcrm": "flcrm", "r1": "r1", "r2": "r2"}[name]
    fitter = fit_fpca if name == "fpca" else fit_fpls
    cfg = FplsConfig(p0=settings.p0, p1=settings.p1, kappa0=settings.kappa0,
                     max_outer_iters=settings.max_outer_iters, variant=variant)
    if settings.grid:
        _, _, fit = select_p(train, settings.grid, cfg, fitter=fitter)
        return fit
    return fitter(train, cfg)


def _one_replication(spec: ScenarioSpec, estimators: tuple[str, ...], rep: int, c0: float,
                     settings: BenchSettings) -> list[dict]:
    seq = np.random.SeedSequence([spec.seed, rep])
    train_seq, test_seq = seq.spawn(2)
    eigen = make_eigenimages(spec.dims, spec.eigen_seed)
    train, truth = simulate_dataset(spec, eigen, c0, np.random.default_rng(train_seq))
    test, _ = simulate_dataset(spec, eigen, c0, np.random.default_rng(test_seq))
    rows = []
    for name in estimators:
        started = time.perf_counter()
        row = {"rep": rep, "estimator": name, "scenario": spec.scenario, "n": spec.n}
        try:
            if name == "oracle":
                params, p0, p1, conv, longi = truth.as_fjm_params(), 0, 0, True, True
            else:
                fit = _fit_one(name, train, settings)
                params, p0, p1, conv, longi = fit.params, fit.p0, fit.p1, fit.converged, fit.longitudinal
            row.update(p0=p0, p1=p1, mse_b0=mse_functional(params.b0, truth.b0),
                       mse_b1=mse_functional(params.b1, truth.b1),
                       cindex=c_index(risk_scores(params, test, longi), test.arrays.T,
                                      test.arrays.event),
                       converged=bool(conv))
        except (ValueError, EmError, np.linalg.LinAlgError, FloatingPointError) as exc:
            logger.error("rep %d estimator %s failed: %s", rep, name, exc)
            row.update(p0=0, p1=0, mse_b0=math.nan, mse_b1=math.nan, cindex=math.nan,
                       converged=False)
        row["seconds"] = time.perf_counter() - started
        rows.append(row)
    return rows


def run_replications(spec: ScenarioSpec, estimators: Sequence[str] = ("fpls", "fpca"),
                     reps: int = 1, parallelism: int = 1, settings: BenchSettings | None = None,
                     c0: float | None = None, first_rep: int = 0) -> list[dict]:
    """Simulate ``reps`` datasets and fit every estimator on each.

    Replication ``r`` draws from ``SeedSequence([spec.seed, r])`` (training
    and test sets are its two children), so results do not depend on the
    execution order or the degree of parallelism. The C-index is computed on
    the independent test set. Rows are returned in ``(rep, estimator)`` order.
    """
    if reps < 1:
        raise ValueError("reps must be at least 1")
    unknown = set(estimators) - set(ESTIMATORS)
    if unknown:
        raise ValueError(f"unknown estimators {sorted(unknown)}; choose from {ESTIMATORS}")
    settings = settings or BenchSettings()
    c0 = c0 if c0 is not None else (spec.c0 if spec.c0 is not None
                                     else calibrate_c0(spec, spec.target_censoring))
    est = tuple(estimators)
    rep_ids = range(first_rep, first_rep + reps)
    if parallelism <= 1:
        chunks = [_one_replication(spec, est, r, c0, settings) for r in rep_ids]
    else:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            chunks = list(pool.map(_one_replication, *zip(*[(spec, est, r, c0, settings)
                                                            for r in rep_ids])))
    return [row for chunk in chunks for row in chunk]


def rows_to_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=RESULT_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(row[k])) if isinstance(row[k], float) else row[k])
                         for k in RESULT_COLUMNS})
    return buf.getvalue()


def summarize(rows: Sequence[dict], metrics: Sequence[str] = ("mse_b0", "mse_b1", "cindex")) -> dict:
    """Per-estimator median and interquartile range of each metric (failed rows skipped)."""
    out: dict = {}
    for name in dict.fromkeys(r["estimator"] for r in rows):
        sub = [r for r in rows if r["estimator"] == name]
        entry = {"reps": len(sub), "failed": sum(1 for r in sub if not np.isfinite(r["mse_b0"]))}
        for m in metrics:
            vals = np.array([r[m] for r in sub], dtype=np.float64)
            vals = vals[np.isfinite(vals)]
            if vals.size:
                q1, med, q3 = np.percentile(vals, [25, 50, 75])
                entry[m] = {"median": float(med), "iqr": float(q3 - q1)}
            else:
                entry[m] = {"median": None, "iqr": None}
        out[name] = entry
    return out


def long_format(rows: Sequence[dict], metrics: Sequence[str] = ("mse_b0", "mse_b1", "cindex")) -> str:
    """Plot-ready table ``scenario,estimator,metric,rep,value`` for box plots."""
    lines = ["scenario,estimator,metric,rep,value"]
    for m in metrics:
        for r in rows:
            lines.append(f"{r['scenario']},{r['estimator']},{m},{r['rep']},{float(r[m])!r}")
    return "\n".join(lines) + "\n"
