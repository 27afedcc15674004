"""Iterative functional PLS estimation of the functional joint model.

Each outer iteration

1. whitens the longitudinal rows with the current marginal covariance
   ``V_i = Q_i Sigma_u Q_i' + sigma_eps2 I`` and builds the longitudinal
   basis by RAPLS on the stacked system,
2. linearizes the survival submodel around the current fit (IRLS
   pseudo-responses with weights ``mu_i``) and builds the survival basis by
   RAPLS on the ``sqrt(mu)``-weighted system,
3. refits the reduced joint model on the two bases by EM, warm-started from
   the projection of the current coefficient images, and damps the image
   update with step size ``a_m``.

Iteration stops when the squared L2 change of both coefficient images falls
below ``kappa0``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

from .fpca import fpca_fjm_init, fpca_svd
from .funcdata import (FjmDataset, FunctionOnGrid, LongArrays, inner_product, l2_norm,
                       read_function, write_function, _atomic_write)
from .jointmodel import (CumHaz, EmConfig, EmError, EStep, FjmParams, ReducedDesign, e_step,
                         em_fit, q_of_t)
from .plscore import BasisSet, rapls_basis_stacked

logger = logging.getLogger(__name__)

VARIANTS = ("fpls", "r1", "r2", "flcrm")
MU_FLOOR = 1e-6
RESIDUAL_CLIP = 10.0
WHITEN_EIG_FLOOR = 1e-12
BIC_TIE_TOL = 1e-12


class FitError(RuntimeError):
    """Raised when no estimate can be produced (e.g. every pair of a BIC grid failed)."""


@dataclass(frozen=True)
class FplsConfig:
    """Settings of one FPLS fit.

    ``variant`` selects the model: ``fpls`` (image in both submodels), ``r1``
    (no image in the longitudinal submodel), ``r2`` (no image in the survival
    submodel) or ``flcrm`` (survival submodel only).
    """

    p0: int = 2
    p1: int = 2
    kappa0: float = 1e-6
    max_outer_iters: int = 100
    step_rule: str = "harmonic"
    image_scale: float | str = "auto"
    em_config: EmConfig = field(default_factory=EmConfig)
    variant: str = "fpls"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.p0 < 1 and self.variant in ("fpls", "r2"):
            raise ValueError("p0 must be at least 1")
        if self.p1 < 1 and self.variant in ("fpls", "r1", "flcrm"):
            raise ValueError("p1 must be at least 1")
        if not self.kappa0 > 0:
            raise ValueError("kappa0 must be positive")
        if self.max_outer_iters < 1:
            raise ValueError("max_outer_iters must be at least 1")
        if self.step_rule not in ("harmonic", "constant"):
            raise ValueError("step_rule must be 'harmonic' or 'constant'")
        if self.image_scale != "auto" and not (isinstance(self.image_scale, (int, float))
                                               and self.image_scale > 0):
            raise ValueError("image_scale must be 'auto' or a positive number")

    @property
    def longitudinal(self) -> bool:
        return self.variant != "flcrm"

    @property
    def effective_p(self) -> tuple[int, int]:
        p0 = self.p0 if self.variant in ("fpls", "r2") else 0
        p1 = self.p1 if self.variant in ("fpls", "r1", "flcrm") else 0
        return p0, p1

    def step_size(self, m: int) -> float:
        return 1.0 / m if self.step_rule == "harmonic" else 1.0


@dataclass(frozen=True, eq=False)
class FitResult:
    """Fitted functional joint model on the original image scale."""

    params: FjmParams
    bases: tuple[BasisSet | None, BasisSet | None]
    outer_trace: list[dict]
    converged: bool
    loglik: float
    image_scale: float
    variant: str
    selection: list[dict] | None = None
    seconds: float = 0.0

    @property
    def p0(self) -> int:
        return self.bases[0].p if self.bases[0] is not None else 0

    @property
    def p1(self) -> int:
        return self.bases[1].p if self.bases[1] is not None else 0

    @property
    def longitudinal(self) -> bool:
        return self.variant != "flcrm"

    def design(self, dataset: FjmDataset) -> ReducedDesign:
        return ReducedDesign.from_functions(dataset, self.params.b0, self.params.b1, self.longitudinal)

    def fitted_scores(self, dataset: FjmDataset) -> np.ndarray:
        """``n x 2`` matrix of ``int x_i b0`` and ``int x_i b1``."""
        des = self.design(dataset)
        return np.column_stack([des.long_scores[:, 0], des.surv_scores[:, 0]])

    def to_dict(self) -> dict:
        p = self.params
        return {
            "variant": self.variant,
            "p0": self.p0,
            "p1": self.p1,
            "converged": self.converged,
            "loglik": self.loglik,
            "image_scale": self.image_scale,
            "seconds": self.seconds,
            "params": {
                "beta0": p.beta0,
                "beta1": p.beta1.tolist(),
                "gamma": p.gamma.tolist(),
                "alpha": p.alpha,
                "sigma_u": p.sigma_u.tolist(),
                "sigma_eps2": p.sigma_eps2,
                "cumhaz": {"jump_times": p.cumhaz.jump_times.tolist(),
                           "jumps": p.cumhaz.jumps.tolist()},
            },
            "outer_trace": self.outer_trace,
            "selection": self.selection,
        }


# ---------------------------------------------------------------------------
# Step 1: longitudinal basis
# ---------------------------------------------------------------------------

def _subject_slices(data: LongArrays) -> list[slice]:
    ends = np.cumsum(data.counts)
    return [slice(int(e - c), int(e)) for e, c in zip(ends, data.counts)]


def whiten_longitudinal(params: FjmParams, data: LongArrays) -> list[np.ndarray]:
    """Symmetric inverse square roots ``V_i^{-1/2}`` of the marginal visit covariances."""
    out = []
    for sl in _subject_slices(data):
        Q = data.q[sl]
        V = Q @ params.sigma_u @ Q.T + params.sigma_eps2 * np.eye(len(Q))
        lam, vec = np.linalg.eigh(V)
        out.append((vec / np.sqrt(np.maximum(lam, WHITEN_EIG_FLOOR))) @ vec.T)
    return out


def _whitened_system(dataset: FjmDataset, params: FjmParams):
    d = dataset.arrays
    roots = whiten_longitudinal(params, d)
    N = len(d.y)
    scalar = np.column_stack([np.ones(N), d.time, d.z[d.subject]])
    yw = np.empty(N)
    Zw = np.empty_like(scalar)
    W = np.zeros((N, d.n))
    for i, (sl, R) in enumerate(zip(_subject_slices(d), roots)):
        yw[sl] = R @ d.y[sl]
        Zw[sl] = R @ scalar[sl]
        W[sl, i] = R.sum(axis=1)
    return W, Zw, yw


def step1_longitudinal_basis(dataset: FjmDataset, params: FjmParams, p0: int) -> BasisSet:
    """RAPLS basis for the whitened longitudinal regression on ``[1, t, z]`` and the image."""
    W, Zw, yw = _whitened_system(dataset, params)
    return rapls_basis_stacked(dataset.images, W, Zw, yw, p0)


# ---------------------------------------------------------------------------
# Step 2: survival basis
# ---------------------------------------------------------------------------

def step2_pseudo_response(dataset: FjmDataset, params: FjmParams, estep: EStep | None = None,
                          longitudinal: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """IRLS weights ``mu_i`` and working responses for the survival submodel.

    ``mu_i = Lambda0(T_i) E_i[exp(omega_i' gamma + int x_i b1 + alpha m_i(T_i))]``
    and ``y_i = int x_i b1 + (Delta_i - mu_i) / mu_i``. Weights are floored at
    ``MU_FLOOR`` and working residuals clipped to ``+-RESIDUAL_CLIP``.
    """
    design = ReducedDesign.from_functions(dataset, params.b0, params.b1, longitudinal)
    direct = params.as_direct()
    if estep is None:
        estep = e_step(direct, design)
    d = design.data
    s1b1 = design.surv_scores[:, 0]
    if longitudinal:
        cfix, slope = design.static_split(direct)
        qT = q_of_t(d.T, d.r)
        m_nodes = (cfix + slope * d.T)[:, None] + np.einsum("njr,nr->nj", estep.u_nodes, qT)
        alpha = direct.alpha
    else:
        m_nodes = np.zeros((d.n, 1))
        alpha = 0.0
    lin = d.omega @ params.gamma + s1b1
    expected = np.sum(estep.weights * np.exp(lin[:, None] + alpha * m_nodes), axis=1)
    mu = np.maximum(params.cumhaz(d.T) * expected, MU_FLOOR)
    resid = np.clip((d.event - mu) / mu, -RESIDUAL_CLIP, RESIDUAL_CLIP)
    return mu, s1b1 + resid


def step2_survival_basis(dataset: FjmDataset, mu, y_work, p1: int) -> BasisSet:
    """RAPLS basis of the ``sqrt(mu)``-weighted regression of the working response on ``[1, omega]`` and the image."""
    mu = np.asarray(mu, dtype=np.float64)
    if np.any(mu <= 0):
        raise ValueError("IRLS weights must be positive")
    w = np.sqrt(mu)
    d = dataset.arrays
    scalar = np.column_stack([np.ones(d.n), d.omega])
    return rapls_basis_stacked(dataset.images, np.diag(w), w[:, None] * scalar,
                               w * np.asarray(y_work, dtype=np.float64), p1)


# ---------------------------------------------------------------------------
# Step 3: reduced-model EM and damped update
# ---------------------------------------------------------------------------

def step3_update(dataset: FjmDataset, psi: BasisSet | None, zeta: BasisSet | None,
                 params: FjmParams, step_size: float, em_config: EmConfig | None = None,
                 longitudinal: bool = True):
    """EM on the new bases, then ``b <- (1 - a) b + a * proposal`` for both images.

    Returns the updated parameters and the EM trace.
    """
    design = ReducedDesign.from_bases(dataset, psi, zeta, longitudinal)
    init = params.to_reduced(psi, zeta)
    fitted, trace = em_fit(design, init, em_config)
    proposal = fitted.to_functional(psi, zeta, dataset.grid)
    a = float(step_size)
    b0 = params.b0 * (1.0 - a) + proposal.b0 * a
    b1 = params.b1 * (1.0 - a) + proposal.b1 * a
    return replace(proposal, b0=b0, b1=b1), trace


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

def auto_image_scale(dataset: FjmDataset) -> float:
    """Factor making the L2 norm of the mean image equal to one."""
    mean = dataset.images.mean_function()
    nrm = l2_norm(mean)
    if nrm <= 1e-12 * max(np.sqrt(np.mean(dataset.images.values ** 2)), 1e-300):
        raise ValueError("mean image is zero; pass a numeric image_scale")
    return 1.0 / nrm


def _criterion(a: FjmParams, b: FjmParams) -> float:
    d0, d1 = a.b0 - b.b0, a.b1 - b.b1
    return inner_product(d0, d0) + inner_product(d1, d1)


def _loglik(dataset: FjmDataset, params: FjmParams, longitudinal: bool, cfg: EmConfig) -> float:
    design = ReducedDesign.from_functions(dataset, params.b0, params.b1, longitudinal)
    return e_step(params.as_direct(), design, cfg).loglik


def fit_fpls(dataset: FjmDataset, config: FplsConfig | None = None) -> FitResult:
    """Fit the functional joint model by iterating the three FPLS steps."""
    cfg = config or FplsConfig()
    started = time.perf_counter()
    scale = auto_image_scale(dataset) if cfg.image_scale == "auto" else float(cfg.image_scale)
    data = dataset.with_images(dataset.images.scaled(scale))
    p0, p1 = cfg.effective_p
    longi = cfg.longitudinal
    emc = cfg.em_config

    params, _, _, (psi, zeta) = fpca_fjm_init(data, p0, p1, emc, longitudinal=longi)
    trace: list[dict] = []
    converged = False
    for m in range(1, cfg.max_outer_iters + 1):
        if p0:
            try:
                psi = step1_longitudinal_basis(data, params, p0)
            except ValueError as exc:
                logger.warning("longitudinal basis kept from previous iteration: %s", exc)
        if p1:
            mu, y_work = step2_pseudo_response(data, params, longitudinal=longi)
            try:
                zeta = step2_survival_basis(data, mu, y_work, p1)
            except ValueError as exc:
                logger.warning("survival basis kept from previous iteration: %s", exc)
        a = cfg.step_size(m)
        try:
            new, em_trace = step3_update(data, psi, zeta, params, a, emc, longi)
        except EmError as exc:
            logger.error("EM failed at outer iteration %d: %s", m, exc)
            trace.append({"iteration": m, "criterion": math.nan, "loglik": math.nan,
                          "step": a, "em_iterations": 0, "em_converged": False})
            break
        crit = _criterion(new, params)
        params = new
        trace.append({"iteration": m, "criterion": crit, "loglik": em_trace.final, "step": a,
                      "em_iterations": em_trace.n_iter, "em_converged": em_trace.converged})
        if crit < cfg.kappa0:
            converged = True
            break
    if not converged:
        logger.warning("FPLS did not converge in %d outer iterations", len(trace))
    loglik = _loglik(data, params, longi, emc)
    out = params.scaled_images(1.0 / scale)
    return FitResult(out, (psi, zeta), trace, converged, loglik, scale, cfg.variant,
                     seconds=time.perf_counter() - started)


def fit_fpca(dataset: FjmDataset, config: FplsConfig | None = None) -> FitResult:
    """FPCA estimator with the same variants, scaling and result type as :func:`fit_fpls`."""
    cfg = config or FplsConfig()
    started = time.perf_counter()
    scale = auto_image_scale(dataset) if cfg.image_scale == "auto" else float(cfg.image_scale)
    data = dataset.with_images(dataset.images.scaled(scale))
    p0, p1 = cfg.effective_p
    params, _, em_trace, bases = fpca_fjm_init(data, p0, p1, cfg.em_config,
                                               longitudinal=cfg.longitudinal)
    loglik = _loglik(data, params, cfg.longitudinal, cfg.em_config)
    trace = [{"iteration": 1, "criterion": 0.0, "loglik": em_trace.final, "step": 1.0,
              "em_iterations": em_trace.n_iter, "em_converged": em_trace.converged}]
    return FitResult(params.scaled_images(1.0 / scale), bases, trace, em_trace.converged, loglik,
                     scale, cfg.variant, seconds=time.perf_counter() - started)


def bic(dataset: FjmDataset, fitted: FitResult) -> float:
    """``log(n) (p0 + p1) - 2 * observed-data log-likelihood`` at the fitted parameters."""
    ll = _loglik(dataset, fitted.params, fitted.longitudinal, EmConfig())
    return math.log(dataset.n) * (fitted.p0 + fitted.p1) - 2.0 * ll


def select_p(dataset: FjmDataset, grid: Iterable[tuple[int, int]], config: FplsConfig | None = None,
             fitter=fit_fpls) -> tuple[tuple[int, int], list[dict], FitResult]:
    """BIC grid search over ``(p0, p1)``.

    Returns the chosen pair, the BIC surface (one row per pair, failures
    included) and the fit at the chosen pair. Ties (equal up to a relative
    ``1e-12``) go to the smaller ``p0 + p1``, then the smaller ``p1``.
    """
    cfg = config or FplsConfig()
    pairs = [(int(a), int(b)) for a, b in grid]
    if not pairs:
        raise ValueError("the (p0, p1) grid is empty")
    surface, fits = [], {}
    for p0, p1 in pairs:
        row = {"p0": p0, "p1": p1, "bic": math.nan, "loglik": math.nan, "converged": False,
               "error": ""}
        try:
            fit = fitter(dataset, replace(cfg, p0=p0, p1=p1))
            row.update(bic=math.log(dataset.n) * (fit.p0 + fit.p1) - 2.0 * fit.loglik,
                       loglik=fit.loglik, converged=fit.converged)
            fits[(p0, p1)] = fit
        except (ValueError, EmError, np.linalg.LinAlgError) as exc:
            row["error"] = f"{type(exc).__name__}: {exc}"
            logger.warning("fit at (p0, p1) = (%d, %d) failed: %s", p0, p1, exc)
        surface.append(row)
    ok = [r for r in surface if np.isfinite(r["bic"])]
    if not ok:
        detail = "; ".join(f"({r['p0']},{r['p1']}): {r['error']}" for r in surface)
        raise FitError(f"every fit in the grid failed: {detail}")
    low = min(r["bic"] for r in ok)
    # BIC values equal up to rounding count as ties
    tied = [r for r in ok if r["bic"] <= low + BIC_TIE_TOL * max(1.0, abs(low))]
    best = min(tied, key=lambda r: (r["p0"] + r["p1"], r["p1"]))
    pair = (best["p0"], best["p1"])
    return pair, surface, replace(fits[pair], selection=surface)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_fit(result: FitResult, out_dir) -> Path:
    """Write ``fit.json`` plus ``b0``/``b1`` coefficient-image sidecars; returns the JSON path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_function(result.params.b0, out_dir / "b0.json")
    write_function(result.params.b1, out_dir / "b1.json")
    doc = result.to_dict()
    doc["b0"], doc["b1"] = "b0.json", "b1.json"
    path = out_dir / "fit.json"
    _atomic_write(path, json.dumps(doc, indent=1, allow_nan=True).encode())
    return path


def load_fit(path) -> tuple[FjmParams, dict]:
    """Read parameters written by :func:`save_fit`; returns them and the raw document."""
    path = Path(path)
    doc = json.loads(path.read_text())
    p = doc["params"]
    params = FjmParams(
        beta0=p["beta0"], beta1=np.asarray(p["beta1"], float), gamma=np.asarray(p["gamma"], float),
        alpha=p["alpha"], sigma_u=np.asarray(p["sigma_u"], float), sigma_eps2=p["sigma_eps2"],
        b0=read_function(path.parent / doc["b0"]), b1=read_function(path.parent / doc["b1"]),
        cumhaz=CumHaz(np.asarray(p["cumhaz"]["jump_times"], float),
                      np.asarray(p["cumhaz"]["jumps"], float)))
    return params, doc
