"""Joint model of a longitudinal marker and a survival time with shared random effects.

Longitudinal submodel, for visit ``k`` of subject ``i``::

    y_ik = m_i(t_ik) + e_ik,   m_i(t) = beta0 + beta_t t + z_i' beta_z + s0_i' b0 + q(t)' u_i

with ``u_i ~ N(0, Sigma_u)``, ``e_ik ~ N(0, sigma_eps2)`` and ``q(t) = 1`` or
``(1, t)``. Survival submodel::

    lambda_i(t | u_i) = lambda0(t) exp(omega_i' gamma + s1_i' b1 + alpha m_i(t))

where ``s0_i`` and ``s1_i`` are image scores on low-dimensional bases. The
baseline hazard is a step function with jumps at the observed event times
(Breslow), so all time integrals are finite sums.

Estimation is by EM. Posterior expectations over ``u_i`` use adaptive
Gauss-Hermite quadrature in the whitened coordinates ``u = L v`` with
``L L' = Sigma_u``, which also covers singular ``Sigma_u``.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace
from functools import cached_property, lru_cache
from typing import Callable

import numpy as np
from scipy.special import logsumexp

from .funcdata import FjmDataset, FunctionalGrid, FunctionOnGrid, LongArrays, functional_matvec
from .plscore import BasisSet

logger = logging.getLogger(__name__)

LOG_2PI = math.log(2.0 * math.pi)


class EmError(RuntimeError):
    """Raised when the EM algorithm cannot produce a usable fit."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class EmConfig:
    max_iter: int = 200
    tol: float = 1e-8
    n_nodes: int = 9
    fallback_nodes: int = 21
    mode_tol: float = 1e-9
    mode_max_iter: int = 50
    max_halvings: int = 10
    ridge: float = 1e-8
    monotone_slack: float = 1e-6
    accelerate: bool = True
    max_extrapolation_tries: int = 4


@dataclass(frozen=True, eq=False)
class CumHaz:
    """Step-function cumulative baseline hazard ``Lambda0(t) = sum_{t_k <= t} jumps_k``."""

    jump_times: np.ndarray
    jumps: np.ndarray

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=np.float64).ravel()
        jp = np.asarray(self.jumps, dtype=np.float64).ravel()
        if jt.shape != jp.shape:
            raise ValueError("jump_times and jumps differ in length")
        if np.any(np.diff(jt) <= 0):
            raise ValueError("jump times must be sorted and distinct")
        if np.any(jp < 0):
            raise ValueError("hazard jumps must be nonnegative")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "jumps", jp)

    def __call__(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        csum = np.concatenate([[0.0], np.cumsum(self.jumps)])
        return csum[np.searchsorted(self.jump_times, t, side="right")]

    def jump_at(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        idx = np.searchsorted(self.jump_times, t)
        idx_c = np.minimum(idx, max(len(self.jump_times) - 1, 0))
        hit = (idx < len(self.jump_times)) & (self.jump_times[idx_c] == t) if len(self.jumps) else \
            np.zeros(t.shape, bool)
        return np.where(hit, self.jumps[idx_c] if len(self.jumps) else 0.0, 0.0)

    @classmethod
    def empty(cls) -> "CumHaz":
        return cls(np.zeros(0), np.zeros(0))


@dataclass(frozen=True, eq=False)
class JmParams:
    """Parameters of the reduced (low-dimensional) joint model.

    ``beta1`` holds the time slope followed by the ``z`` coefficients;
    ``b0_coef`` and ``b1_coef`` are coefficients on the current bases.
    """

    beta0: float
    beta1: np.ndarray
    b0_coef: np.ndarray
    gamma: np.ndarray
    b1_coef: np.ndarray
    alpha: float
    sigma_u: np.ndarray
    sigma_eps2: float
    cumhaz: CumHaz

    def __post_init__(self):
        for name in ("beta1", "b0_coef", "gamma", "b1_coef"):
            object.__setattr__(self, name, np.atleast_1d(np.asarray(getattr(self, name), float)))
        su = np.atleast_2d(np.asarray(self.sigma_u, float))
        su = 0.5 * (su + su.T)
        lam, vec = np.linalg.eigh(su)
        if lam.min() < -1e-10 * max(1.0, abs(lam).max()):
            raise ValueError("sigma_u must be positive semidefinite")
        if lam.min() < 0:
            su = (vec * np.clip(lam, 0, None)) @ vec.T
        object.__setattr__(self, "sigma_u", su)
        if not self.sigma_eps2 > 0:
            raise ValueError("sigma_eps2 must be positive")
        object.__setattr__(self, "beta0", float(self.beta0))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "sigma_eps2", float(self.sigma_eps2))

    @property
    def beta(self) -> np.ndarray:
        return np.concatenate([[self.beta0], self.beta1, self.b0_coef])

    @property
    def surv_coef(self) -> np.ndarray:
        return np.concatenate([self.gamma, self.b1_coef])

    def with_beta(self, beta: np.ndarray) -> "JmParams":
        nb1 = len(self.beta1)
        return replace(self, beta0=beta[0], beta1=beta[1:1 + nb1], b0_coef=beta[1 + nb1:])

    def with_surv(self, g: np.ndarray, alpha: float) -> "JmParams":
        pw = len(self.gamma)
        return replace(self, gamma=g[:pw], b1_coef=g[pw:], alpha=alpha)

    def to_functional(self, psi: BasisSet | None, zeta: BasisSet | None,
                      grid: FunctionalGrid) -> "FjmParams":
        b0 = psi.expand(self.b0_coef) if psi is not None and psi.p else FunctionOnGrid.zeros(grid)
        b1 = zeta.expand(self.b1_coef) if zeta is not None and zeta.p else FunctionOnGrid.zeros(grid)
        return FjmParams(self.beta0, self.beta1, self.gamma, self.alpha, self.sigma_u,
                         self.sigma_eps2, b0, b1, self.cumhaz)


@dataclass(frozen=True, eq=False)
class FjmParams:
    """Parameters of the functional joint model (coefficient images ``b0``, ``b1``)."""

    beta0: float
    beta1: np.ndarray
    gamma: np.ndarray
    alpha: float
    sigma_u: np.ndarray
    sigma_eps2: float
    b0: FunctionOnGrid
    b1: FunctionOnGrid
    cumhaz: CumHaz

    def to_reduced(self, psi: BasisSet | None, zeta: BasisSet | None) -> JmParams:
        """Project ``b0``/``b1`` onto the bases (L2 projection)."""
        b0c = psi.project(self.b0) if psi is not None else np.zeros(0)
        b1c = zeta.project(self.b1) if zeta is not None else np.zeros(0)
        return JmParams(self.beta0, self.beta1, b0c, self.gamma, b1c, self.alpha,
                        self.sigma_u, self.sigma_eps2, self.cumhaz)

    def as_direct(self) -> JmParams:
        """Reduced parameters for :meth:`ReducedDesign.from_functions` (unit coefficients)."""
        return JmParams(self.beta0, self.beta1, np.ones(1), self.gamma, np.ones(1), self.alpha,
                        self.sigma_u, self.sigma_eps2, self.cumhaz)

    def scaled_images(self, c: float) -> "FjmParams":
        """Parameters for images multiplied by ``c`` (coefficient images divided by ``c``)."""
        return replace(self, b0=self.b0 * (1.0 / c), b1=self.b1 * (1.0 / c))


def q_of_t(t, r: int) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    return np.ones((t.size, 1)) if r == 1 else np.column_stack([np.ones(t.size), t])


@dataclass(frozen=True, eq=False)
class ReducedDesign:
    """Scalar designs plus image scores of the reduced joint model.

    ``longitudinal=False`` drops the longitudinal submodel (functional Cox
    regression); ``alpha`` is then fixed at zero.
    """

    data: LongArrays
    long_scores: np.ndarray
    surv_scores: np.ndarray
    longitudinal: bool = True

    def __post_init__(self):
        n = self.data.n
        ls = np.asarray(self.long_scores, dtype=np.float64).reshape(n, -1)
        ss = np.asarray(self.surv_scores, dtype=np.float64).reshape(n, -1)
        if not (np.all(np.isfinite(ls)) and np.all(np.isfinite(ss))):
            raise ValueError("image scores must be finite")
        object.__setattr__(self, "long_scores", ls)
        object.__setattr__(self, "surv_scores", ss)

    @classmethod
    def from_bases(cls, dataset: FjmDataset, psi: BasisSet | None, zeta: BasisSet | None,
                   longitudinal: bool = True) -> "ReducedDesign":
        n = dataset.n
        s0 = psi.scores(dataset.images) if psi is not None else np.zeros((n, 0))
        s1 = zeta.scores(dataset.images) if zeta is not None else np.zeros((n, 0))
        return cls(dataset.arrays, s0, s1, longitudinal)

    @classmethod
    def from_functions(cls, dataset: FjmDataset, b0: FunctionOnGrid, b1: FunctionOnGrid,
                       longitudinal: bool = True) -> "ReducedDesign":
        """One score column per submodel, ``int x_i b``; pair with :meth:`FjmParams.as_direct`."""
        return cls(dataset.arrays, functional_matvec(dataset.images, b0)[:, None],
                   functional_matvec(dataset.images, b1)[:, None], longitudinal)

    @property
    def n(self) -> int:
        return self.data.n

    @property
    def r(self) -> int:
        return self.data.r

    @property
    def p0(self) -> int:
        return self.long_scores.shape[1]

    @property
    def p1(self) -> int:
        return self.surv_scores.shape[1]

    @cached_property
    def x_long(self) -> np.ndarray:
        """``N x (2 + p_z + p0)`` fixed-effect design ``[1, t, z, s0]`` of the visits."""
        d = self.data
        return np.column_stack([np.ones(len(d.y)), d.time, d.z[d.subject],
                                self.long_scores[d.subject]])

    @cached_property
    def subject_static(self) -> np.ndarray:
        """``n x (1 + p_z + p0)`` time-constant part ``[1, z, s0]`` of the fixed effects."""
        d = self.data
        return np.column_stack([np.ones(d.n), d.z, self.long_scores])

    @cached_property
    def a_surv(self) -> np.ndarray:
        """``n x (p_w + p1)`` time-constant survival covariates ``[omega, s1]``."""
        return np.column_stack([self.data.omega, self.surv_scores])

    @cached_property
    def events(self) -> "_EventStructure":
        return _EventStructure.build(self.data)

    @cached_property
    def qtq(self) -> np.ndarray:
        d = self.data
        out = np.zeros((d.n, d.r, d.r))
        np.add.at(out, d.subject, d.q[:, :, None] * d.q[:, None, :])
        return out

    def static_split(self, params: JmParams) -> tuple[np.ndarray, float]:
        """Per-subject constant part of ``m_i(t)`` and the time slope."""
        b = params.beta
        const = self.subject_static @ np.concatenate([[b[0]], b[2:]])
        return const, b[1]


@dataclass(frozen=True, eq=False)
class _EventStructure:
    jump_times: np.ndarray    # (K,)
    d: np.ndarray             # (K,) events per jump time
    at_risk: np.ndarray       # (n, K) T_i >= t_k
    event_k: np.ndarray       # (n,) index of the subject's own jump, -1 if censored

    @classmethod
    def build(cls, data: LongArrays) -> "_EventStructure":
        jt, d = np.unique(data.T[data.event], return_counts=True)
        at_risk = (data.T[:, None] >= jt[None, :]).astype(np.float64)
        event_k = np.where(data.event, np.searchsorted(jt, data.T), -1)
        return cls(jt, d.astype(np.float64), at_risk, event_k)

    @property
    def K(self) -> int:
        return len(self.jump_times)


# ---------------------------------------------------------------------------
# Likelihood pieces
# ---------------------------------------------------------------------------

def _sqrt_factor(S: np.ndarray) -> np.ndarray:
    lam, vec = np.linalg.eigh(S)
    return vec * np.sqrt(np.clip(lam, 0.0, None))


def _hazard_support(params: JmParams, design: ReducedDesign):
    """Jump times, jumps and at-risk indicators of the baseline hazard on this design.

    Fitted hazards jump exactly at the design's event times, which reuses the
    cached risk sets; any other hazard is evaluated at its own jump times.
    """
    ch = params.cumhaz
    ev = design.events
    if np.array_equal(ch.jump_times, ev.jump_times):
        return ev.jump_times, ch.jumps, ev.at_risk
    at_risk = (design.data.T[:, None] >= ch.jump_times[None, :]).astype(np.float64)
    return ch.jump_times, ch.jumps, at_risk


@dataclass(frozen=True, eq=False)
class _SubjectTerms:
    """Quantities defining ``log p(y_i, T_i, Delta_i | u_i = L v)`` as a function of ``v``."""

    L: np.ndarray          # (r, r)
    const: np.ndarray      # (n,)
    quad: np.ndarray       # (n, r, r)  L' Q'Q L / sigma2
    lin: np.ndarray        # (n, r)     L' Q' e / sigma2 + Delta alpha L' q(T)
    h: np.ndarray          # (n, K)     at-risk hazard mass at v = 0
    qk: np.ndarray         # (K, r)     alpha L' q(t_k)

    def logp(self, V: np.ndarray, with_const: bool = True) -> np.ndarray:
        """Evaluate at nodes ``V`` of shape ``(n, J, r)``; returns ``(n, J)`` (prior excluded).

        ``with_const=False`` drops the part that does not depend on ``v``,
        which may be ``-inf`` when the baseline hazard is zero at an event.
        """
        quad = np.einsum("njr,nrs,njs->nj", V, self.quad, V)
        out = -0.5 * quad + np.einsum("njr,nr->nj", V, self.lin)
        if with_const:
            out = out + self.const[:, None]
        if self.h.shape[1]:
            out -= np.einsum("nk,njk->nj", self.h, np.exp(V @ self.qk.T))
        return out


def _subject_terms(params: JmParams, design: ReducedDesign) -> _SubjectTerms:
    d = design.data
    r = d.r
    longi = design.longitudinal
    alpha = params.alpha if longi else 0.0
    L = _sqrt_factor(params.sigma_u) if longi else np.zeros((r, r))
    cfix, slope = design.static_split(params)
    const = np.zeros(d.n)
    lin = np.zeros((d.n, r))
    quad = np.zeros((d.n, r, r))
    if longi:
        s2 = params.sigma_eps2
        e = d.y - design.x_long @ params.beta
        const -= 0.5 * (d.counts * (LOG_2PI + math.log(s2))
                        + np.bincount(d.subject, e * e, minlength=d.n) / s2)
        qte = np.zeros((d.n, r))
        np.add.at(qte, d.subject, d.q * e[:, None])
        lin += qte @ L / s2
        quad += np.einsum("rs,nrt,tu->nsu", L, design.qtq, L) / s2
    g = params.surv_coef
    lp_static = design.a_surv @ g + alpha * cfix
    jt, jumps, at_risk = _hazard_support(params, design)
    if len(jt):
        with np.errstate(divide="ignore"):
            log_jumps = np.log(jumps)
        h = at_risk * np.exp(lp_static[:, None] + alpha * slope * jt[None, :]
                             + np.where(jumps > 0, log_jumps, -np.inf)[None, :])
        qk = alpha * q_of_t(jt, r) @ L
    else:
        h = np.zeros((d.n, 0))
        qk = np.zeros((0, r))
    evt = d.event
    if evt.any():
        with np.errstate(divide="ignore"):
            const[evt] += (np.log(params.cumhaz.jump_at(d.T[evt])) + lp_static[evt]
                           + alpha * slope * d.T[evt])
        lin[evt] += alpha * q_of_t(d.T[evt], r) @ L
    return _SubjectTerms(L, const, quad, lin, h, qk)


def complete_data_loglik(params: JmParams, design: ReducedDesign, u) -> float:
    """``sum_i log p(y_i, T_i, Delta_i, u_i)`` at given random effects ``u`` (n x r).

    A singular ``Sigma_u`` uses the degenerate Gaussian density on its range
    (pseudo-inverse and pseudo-determinant); ``u`` outside that range gives
    ``-inf``.
    """
    u = np.asarray(u, dtype=np.float64).reshape(design.n, design.r)
    # evaluate the conditional part with L = I by temporarily using identity coordinates
    terms = _subject_terms(replace(params, sigma_u=np.eye(design.r)), design)
    val = float(np.sum(terms.logp(u[:, None, :])))
    if not design.longitudinal:
        return val
    S = params.sigma_u
    lam, vec = np.linalg.eigh(S)
    pos = lam > 1e-12 * max(lam.max(), 0.0) if lam.max() > 0 else np.zeros(len(lam), bool)
    proj = u @ vec
    if np.any(np.abs(proj[:, ~pos]) > 1e-10):
        return -math.inf
    rank = int(pos.sum())
    quad = np.sum(proj[:, pos] ** 2 / lam[pos], axis=1)
    val += float(np.sum(-0.5 * (rank * LOG_2PI + np.sum(np.log(lam[pos])) + quad)))
    return val


# ---------------------------------------------------------------------------
# E-step
# ---------------------------------------------------------------------------

@lru_cache(maxsize=16)
def _gh_grid(n_nodes: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    """Tensor Gauss-Hermite nodes ``x`` (J, r) and log of ``w_j exp(|x_j|^2)``."""
    x, w = np.polynomial.hermite.hermgauss(n_nodes)
    pts = np.array(list(itertools.product(x, repeat=r)))
    lw = np.array([sum(np.log(w[list(idx)])) for idx in itertools.product(range(n_nodes), repeat=r)])
    return pts, lw + np.sum(pts ** 2, axis=1)


@dataclass(frozen=True, eq=False)
class EStep:
    """Quadrature representation of the posteriors of ``u_i``."""

    u_nodes: np.ndarray     # (n, J, r)
    weights: np.ndarray     # (n, J), rows sum to one
    loglik_i: np.ndarray    # (n,) log p(y_i, T_i, Delta_i)
    flagged: np.ndarray     # (n,) True where the mode search failed

    @property
    def loglik(self) -> float:
        return float(self.loglik_i.sum())

    @property
    def mean(self) -> np.ndarray:
        return np.einsum("nj,njr->nr", self.weights, self.u_nodes)

    @property
    def second_moment(self) -> np.ndarray:
        return np.einsum("nj,njr,njs->nrs", self.weights, self.u_nodes, self.u_nodes)

    @property
    def cov(self) -> np.ndarray:
        m = self.mean
        return self.second_moment - m[:, :, None] * m[:, None, :]

    def expect(self, h: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """``E[h(u_i)]`` per subject for a vectorized ``h`` mapping (..., r) -> (...)."""
        return np.sum(self.weights * h(self.u_nodes), axis=1)


def _find_modes(terms: _SubjectTerms, cfg: EmConfig) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Newton search for the posterior mode of ``v`` per subject (vectorized)."""
    n, r = terms.lin.shape
    eye = np.eye(r)

    def value(V):
        return terms.logp(V[:, None, :], False)[:, 0] - 0.5 * np.sum(V * V, axis=1)

    def derivs(V):
        grad = terms.lin - np.einsum("nrs,ns->nr", terms.quad, V) - V
        hess = -terms.quad - eye
        if terms.h.shape[1]:
            ex = terms.h * np.exp(V @ terms.qk.T)
            grad -= ex @ terms.qk
            hess = hess - np.einsum("nk,kr,ks->nrs", ex, terms.qk, terms.qk)
        return grad, hess

    V = np.zeros((n, r))
    f = value(V)
    done = np.zeros(n, bool)
    for _ in range(cfg.mode_max_iter):
        grad, hess = derivs(V)
        done = np.max(np.abs(grad), axis=1) < cfg.mode_tol
        if done.all():
            break
        step = np.linalg.solve(-hess, grad[:, :, None])[:, :, 0]
        step[done] = 0.0
        t = np.ones(n)
        for _ in range(30):
            Vn = V + t[:, None] * step
            fn = value(Vn)
            bad = ~(fn >= f - 1e-12 * np.abs(f)) & ~done
            if not bad.any():
                break
            t[bad] *= 0.5
        V, f = np.where(done[:, None], V, Vn), np.where(done, f, fn)
    grad, hess = derivs(V)
    converged = np.max(np.abs(grad), axis=1) < max(cfg.mode_tol, 1e-6)
    return V, hess, converged


def e_step(params: JmParams, design: ReducedDesign, cfg: EmConfig | None = None) -> EStep:
    """Adaptive Gauss-Hermite E-step for every subject."""
    cfg = cfg or EmConfig()
    terms = _subject_terms(params, design)
    n, r = design.n, design.r
    if not design.longitudinal:
        # random effects play no role without the longitudinal submodel
        ll = terms.logp(np.zeros((n, 1, r)))[:, 0]
        return EStep(np.zeros((n, 1, r)), np.ones((n, 1)), ll, np.zeros(n, bool))

    x, lw = _gh_grid(cfg.n_nodes, r)
    modes, hess, ok = _find_modes(terms, cfg)
    # B B' = (-H)^{-1}
    Linv = np.linalg.cholesky(-hess)
    B = np.linalg.inv(Linv).transpose(0, 2, 1)
    logdetB = -np.sum(np.log(np.diagonal(Linv, axis1=1, axis2=2)), axis=1)
    V = modes[:, None, :] + math.sqrt(2.0) * np.einsum("nrs,js->njr", B, x)
    base = 0.5 * r * math.log(2.0) - 0.5 * r * LOG_2PI
    logw = lw[None, :] + logdetB[:, None] + base + terms.logp(V, False) - 0.5 * np.sum(V * V, axis=2)

    flagged = ~ok
    if flagged.any():
        logger.warning("posterior mode search failed for %d subjects; using %d fixed nodes",
                       int(flagged.sum()), cfg.fallback_nodes)
        xf, lwf = _gh_grid(cfg.fallback_nodes, r)
        Vf = math.sqrt(2.0) * np.broadcast_to(xf, (int(flagged.sum()),) + xf.shape)
        sub = _SubjectTerms(terms.L, terms.const[flagged], terms.quad[flagged], terms.lin[flagged],
                            terms.h[flagged], terms.qk)
        logwf = lwf[None, :] + base + sub.logp(Vf, False) - 0.5 * np.sum(Vf * Vf, axis=2)
        J = max(V.shape[1], Vf.shape[1])
        V = np.concatenate([V, np.repeat(modes[:, None, :], J - V.shape[1], axis=1)], axis=1)
        logw = np.concatenate([logw, np.full((n, J - logw.shape[1]), -np.inf)], axis=1)
        V[flagged] = np.concatenate(
            [Vf, np.zeros((Vf.shape[0], J - Vf.shape[1], r))], axis=1)
        logw[flagged] = np.concatenate(
            [logwf, np.full((Vf.shape[0], J - Vf.shape[1]), -np.inf)], axis=1)

    rel = logsumexp(logw, axis=1)
    W = np.exp(logw - rel[:, None])
    ll = rel + terms.const
    U = V @ terms.L.T
    return EStep(U, W, ll, flagged)


def posterior_expectation(params: JmParams, design: ReducedDesign, subject: int,
                          h: Callable[[np.ndarray], np.ndarray], cfg: EmConfig | None = None,
                          estep: EStep | None = None) -> float:
    """``E[h(u_i) | y_i, T_i, Delta_i]`` for subject ``i``; ``h`` maps (..., r) -> (...)."""
    estep = estep or e_step(params, design, cfg)
    return float(np.sum(estep.weights[subject] * h(estep.u_nodes[subject])))


def observed_data_loglik(params: JmParams, design: ReducedDesign, cfg: EmConfig | None = None) -> float:
    """``sum_i log int p(y_i, T_i, Delta_i | u) p(u) du`` by adaptive quadrature."""
    return e_step(params, design, cfg).loglik


# ---------------------------------------------------------------------------
# M-step
# ---------------------------------------------------------------------------

@dataclass
class _SurvivalWork:
    """Sums over risk sets needed by the profile survival Q function.

    For each subject ``i`` and event time ``t_k`` the code needs
    ``sum_j W_ij R_ik exp(eta_ijk) m_ijk^a`` for ``a = 0, 1, 2`` where ``j``
    runs over quadrature nodes. With a random intercept only, ``m_ijk`` is
    ``c_ik + u_ij`` and the node sum factors into tilted posterior moments of
    ``u``; otherwise the full ``(n, J, K)`` array is formed.
    """

    design: ReducedDesign
    estep: EStep
    beta: np.ndarray

    def __post_init__(self):
        des = self.design
        ev = des.events
        b = self.beta
        self.cfix = des.subject_static @ np.concatenate([[b[0]], b[2:]])
        self.slope = b[1]
        self.c = self.cfix[:, None] + self.slope * ev.jump_times[None, :]      # (n, K)
        d = des.data
        self.m_event = (self.cfix + self.slope * d.T
                        + np.einsum("nr,nr->n", q_of_t(d.T, des.r), self.estep.mean))
        self.separable = des.r == 1
        with np.errstate(divide="ignore"):
            self.log_w = np.log(self.estep.weights)
        if not self.separable:
            qk = q_of_t(ev.jump_times, des.r)
            self.m = self.c[:, None, :] + np.einsum("njr,kr->njk", self.estep.u_nodes, qk)
            self.wr = self.estep.weights[:, :, None] * ev.at_risk[:, None, :]
            self.risk_mask = self.wr > 0
        self.at_risk = ev.at_risk > 0

    def _moments(self, g, alpha, order: int):
        """Risk-set sums per (subject, time), scaled by a common ``exp(-shift)``."""
        lin = self.design.a_surv @ g
        if self.separable:
            u = self.estep.u_nodes[:, :, 0]
            lt = self.log_w + alpha * u
            top = lt.max(axis=1, keepdims=True)
            tilt = np.exp(lt - top)
            E = tilt.sum(axis=1)
            h = lin[:, None] + alpha * self.c + (np.log(E) + top[:, 0])[:, None]
            shift = float(np.max(np.where(self.at_risk, h, -np.inf)))
            P = np.where(self.at_risk, np.exp(np.minimum(h - shift, 0.0)), 0.0)
            if order == 0:
                return shift, P
            u1 = (tilt * u).sum(axis=1) / E
            PM = P * (self.c + u1[:, None])
            if order == 1:
                return shift, P, PM
            u2 = (tilt * u * u).sum(axis=1) / E
            PMM = P * (self.c ** 2 + 2 * self.c * u1[:, None] + u2[:, None])
            return shift, P, PM, PMM
        eta = lin[:, None, None] + alpha * self.m
        shift = float(np.max(np.where(self.risk_mask, eta, -np.inf)))
        full = self.wr * np.exp(np.minimum(eta - shift, 0.0))
        out = [shift, full.sum(axis=1)]
        if order >= 1:
            fm = full * self.m
            out.append(fm.sum(axis=1))
            if order >= 2:
                out.append((fm * self.m).sum(axis=1))
        return tuple(out)

    def log_s0(self, g, alpha) -> np.ndarray:
        shift, P = self._moments(g, alpha, 0)
        with np.errstate(divide="ignore"):
            return np.log(P.sum(axis=0)) + shift

    def q_value(self, g, alpha) -> float:
        """Profile (over the baseline hazard) expected complete-data survival log-likelihood."""
        ev = self.design.events
        if ev.K == 0:
            return 0.0
        evt = self.design.data.event
        logS0 = self.log_s0(g, alpha)
        a = self.design.a_surv
        return float(np.sum(a[evt] @ g) + alpha * np.sum(self.m_event[evt])
                     - np.sum(ev.d * logS0) + np.sum(ev.d * np.log(ev.d)) - np.sum(ev.d))

    def breslow(self, g, alpha) -> np.ndarray:
        ev = self.design.events
        if ev.K == 0:
            return np.zeros(0)
        return ev.d * np.exp(-self.log_s0(g, alpha))

    def grad_hess(self, g, alpha, with_alpha: bool):
        des = self.design
        ev = des.events
        evt = des.data.event
        a = des.a_surv
        if not with_alpha:
            _, Pi = self._moments(g, alpha, 0)
            S0 = Pi.sum(axis=0)
            wk = ev.d / S0
            S1a = Pi.T @ a
            grad_g = a[evt].sum(axis=0) - wk @ S1a
            Hgg = a.T @ (a * (Pi @ wk)[:, None])
            Sa = S1a / S0[:, None]
            return grad_g, -(Hgg - np.einsum("k,ka,kb->ab", ev.d, Sa, Sa))
        _, Pi, PMi, PMMi = self._moments(g, alpha, 2)
        S0 = Pi.sum(axis=0)
        wk = ev.d / S0
        S1a = Pi.T @ a
        S1m = PMi.sum(axis=0)
        grad = np.concatenate([a[evt].sum(axis=0) - wk @ S1a,
                               [np.sum(self.m_event[evt]) - wk @ S1m]])
        Hgg = a.T @ (a * (Pi @ wk)[:, None])
        Hga = a.T @ (PMi @ wk)
        Haa = float(np.sum(PMMi @ wk))
        S1 = np.column_stack([S1a, S1m]) / S0[:, None]
        S2 = np.block([[Hgg, Hga[:, None]], [Hga[None, :], np.array([[Haa]])]])
        return grad, -(S2 - np.einsum("k,ka,kb->ab", ev.d, S1, S1))


    def beta_grad_hess(self, g, alpha):
        """Gradient and Hessian of :meth:`q_value` with respect to the fixed effects.

        ``beta`` enters the hazard through ``alpha * m(t)`` with design row
        ``[1, t, z, s0]``. The time column is absorbed by the baseline
        hazard, so its derivatives vanish.
        """
        des = self.design
        ev = des.events
        evt = des.data.event
        sv = des.subject_static
        _, P = self._moments(g, alpha, 0)
        S0 = P.sum(axis=0)
        wk = ev.d / S0
        mean_s = (P.T @ sv) / S0[:, None]
        grad_s = alpha * (sv[evt].sum(axis=0) - ev.d @ mean_s)
        H_s = -alpha ** 2 * (sv.T @ (sv * (P @ wk)[:, None])
                             - np.einsum("k,ka,kb->ab", ev.d, mean_s, mean_s))
        idx = np.r_[0, 2:len(self.beta)]
        grad = np.zeros(len(self.beta))
        H = np.zeros((len(self.beta), len(self.beta)))
        grad[idx] = grad_s
        H[np.ix_(idx, idx)] = H_s
        return grad, H


def _profile_long(design: ReducedDesign, estep: EStep, beta: np.ndarray) -> tuple[float, float]:
    """Expected longitudinal residual sum of squares and its profile log-likelihood."""
    d = design.data
    Eu = estep.mean
    cov = estep.cov
    e = d.y - design.x_long @ beta - np.einsum("nr,nr->n", d.q, Eu[d.subject])
    var_term = np.einsum("nr,nrs,ns->n", d.q, cov[d.subject], d.q)
    S = float(np.sum(e * e + var_term))
    N = len(d.y)
    s2 = S / N
    return s2, -0.5 * N * (LOG_2PI + math.log(s2) + 1.0)


def _newton_direction(grad: np.ndarray, H: np.ndarray, ridge: float) -> np.ndarray:
    A = -H
    scale = max(np.max(np.abs(np.diag(A))), 1.0)
    lam = 0.0
    for _ in range(20):
        try:
            c = np.linalg.cholesky(A + lam * np.eye(len(A)))
            if np.min(np.diag(c)) ** 2 > 1e-14 * scale:
                return np.linalg.solve(A + lam * np.eye(len(A)), grad)
        except np.linalg.LinAlgError:
            pass
        lam = ridge * scale if lam == 0 else lam * 10
    return grad / scale


def _marginal_pieces(design: ReducedDesign, params: JmParams) -> tuple[np.ndarray, np.ndarray]:
    """Marginal information ``sum_i X_i' V_i^{-1} X_i`` and the maps ``Sigma_u Q_i' V_i^{-1} X_i``.

    ``V_i = Q_i Sigma_u Q_i' + sigma2 I``; Woodbury gives ``Q_i' V_i^{-1} = M_i^{-1} Q_i'``
    with ``M_i = sigma2 I + Q_i' Q_i Sigma_u``.
    """
    d = design.data
    X = design.x_long
    s2, S = params.sigma_eps2, params.sigma_u
    XtQ = np.zeros((d.n, X.shape[1], d.r))
    np.add.at(XtQ, d.subject, X[:, :, None] * d.q[:, None, :])
    M = s2 * np.eye(d.r) + design.qtq @ S
    G = np.linalg.solve(M, np.transpose(XtQ, (0, 2, 1)))
    info = (X.T @ X - np.einsum("npr,rs,nsq->pq", XtQ, S, G)) / s2
    return info, np.einsum("rs,nsp->nrp", S, G)


def _update_beta(design: ReducedDesign, estep: EStep, params: JmParams, target: np.ndarray,
                 g: np.ndarray, alpha: float, cfg: EmConfig) -> tuple[np.ndarray, EStep]:
    """Fixed-effect step on the observed-data likelihood, plus the matching E-step shift.

    The gradient of the expected complete-data log-likelihood at the current
    parameters is the observed-data score. Scaling it by the marginal
    information of the Gaussian submodel gives generalized least squares when
    the hazard does not involve ``m``. Plain least squares on the E-step
    residuals converges slowly when ``sigma_eps2`` is small relative to
    ``Sigma_u``, because the posterior of ``u`` then follows ``beta``.

    The posterior nodes are moved by the Gaussian response of ``E[u]`` to the
    step, which is exact for the longitudinal submodel alone. The caller's
    likelihood check guards the step.
    """
    X = design.x_long
    beta = params.beta
    grad = X.T @ (target - X @ beta) / params.sigma_eps2
    info, shift_map = _marginal_pieces(design, params)
    if design.events.K and alpha != 0.0:
        gs, Hs = _SurvivalWork(design, estep, beta).beta_grad_hess(g, alpha)
        grad = grad + gs
        info = info - Hs
    step = _newton_direction(grad, -info, cfg.ridge)
    shift = shift_map @ step
    moved = EStep(estep.u_nodes - shift[:, None, :], estep.weights, estep.loglik_i, estep.flagged)
    return beta + step, moved


def m_step(params: JmParams, design: ReducedDesign, estep: EStep,
           cfg: EmConfig | None = None) -> JmParams:
    """One M-step: fixed effects, then variances, then survival coefficients and hazard.

    The fixed-effect step targets the observed-data likelihood (see
    :func:`_update_beta`); the remaining blocks maximize the expected
    complete-data log-likelihood given the shifted posterior. A survival
    Newton step that lowers that function is halved.
    """
    cfg = cfg or EmConfig()
    longi = design.longitudinal
    new = params
    old_beta = params.beta
    g, alpha = params.surv_coef, (params.alpha if longi else 0.0)

    if longi:
        n = design.n
        d = design.data
        target = d.y - np.einsum("nr,nr->n", d.q, estep.mean[d.subject])
        beta, estep = _update_beta(design, estep, params, target, g, alpha, cfg)
        sigma_u = estep.second_moment.sum(axis=0) / n
        s2, _ = _profile_long(design, estep, beta)
        new = replace(new.with_beta(beta), sigma_u=sigma_u, sigma_eps2=max(s2, 1e-12))

    work = _SurvivalWork(design, estep, new.beta)
    if design.events.K:
        theta = np.concatenate([g, [alpha]]) if longi else g.copy()
        grad, H = work.grad_hess(g, alpha, with_alpha=longi)
        step = _newton_direction(grad, H, cfg.ridge)
        q0 = work.q_value(g, alpha)
        t = 1.0
        accepted = theta
        for _ in range(cfg.max_halvings + 1):
            cand = theta + t * step
            cg, ca = (cand[:-1], cand[-1]) if longi else (cand, 0.0)
            if work.q_value(cg, ca) >= q0 - 1e-12 * abs(q0):
                accepted = cand
                break
            t *= 0.5
        g, alpha = (accepted[:-1], accepted[-1]) if longi else (accepted, 0.0)
    new = new.with_surv(g, alpha)
    ev = design.events
    new = replace(new, cumhaz=CumHaz(ev.jump_times, work.breslow(g, alpha)))
    return new


def breslow_update(params: JmParams, design: ReducedDesign, estep: EStep) -> CumHaz:
    """Jump ``d_k / sum_{T_j >= t_k} E_j[exp(eta_j(t_k))]`` at each distinct event time."""
    ev = design.events
    work = _SurvivalWork(design, estep, params.beta)
    alpha = params.alpha if design.longitudinal else 0.0
    return CumHaz(ev.jump_times, work.breslow(params.surv_coef, alpha))


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------

@dataclass
class EmTrace:
    loglik: list[float] = field(default_factory=list)
    converged: bool = False
    n_iter: int = 0
    flagged_subjects: int = 0
    nonmonotone_steps: int = 0

    @property
    def final(self) -> float:
        return self.loglik[-1] if self.loglik else -math.inf


def _blend(a: JmParams, b: JmParams, s: float) -> JmParams:
    """``a + s (b - a)`` blockwise (baseline hazards must share their jump times)."""
    def mix(x, y):
        return x + s * (y - x)
    ch = CumHaz(b.cumhaz.jump_times, mix(_jumps_like(a.cumhaz, b.cumhaz), b.cumhaz.jumps))
    return JmParams(mix(a.beta0, b.beta0), mix(a.beta1, b.beta1), mix(a.b0_coef, b.b0_coef),
                    mix(a.gamma, b.gamma), mix(a.b1_coef, b.b1_coef), mix(a.alpha, b.alpha),
                    mix(a.sigma_u, b.sigma_u), mix(a.sigma_eps2, b.sigma_eps2), ch)


def _jumps_like(a: CumHaz, b: CumHaz) -> np.ndarray:
    if np.array_equal(a.jump_times, b.jump_times):
        return a.jumps
    return a.jump_at(b.jump_times)


def _pack(p: JmParams) -> np.ndarray:
    """Flat parameter vector; variances and hazard jumps on the log scale."""
    iu = np.triu_indices(p.sigma_u.shape[0])
    return np.concatenate([[p.beta0], p.beta1, p.b0_coef, p.gamma, p.b1_coef, [p.alpha],
                           p.sigma_u[iu], [math.log(p.sigma_eps2)], np.log(p.cumhaz.jumps)])


def _unpack(v: np.ndarray, like: JmParams) -> JmParams | None:
    """Inverse of :func:`_pack` using ``like`` for the shapes; ``None`` if ``v`` is not admissible."""
    if not np.all(np.isfinite(v)):
        return None
    sizes = [1, len(like.beta1), len(like.b0_coef), len(like.gamma), len(like.b1_coef), 1]
    r = like.sigma_u.shape[0]
    iu = np.triu_indices(r)
    parts = np.split(v, np.cumsum(sizes + [len(iu[0]), 1]))
    su = np.zeros((r, r))
    su[iu] = parts[6]
    su = su + np.triu(su, 1).T
    if np.linalg.eigvalsh(su).min() < 0:
        return None
    try:
        return JmParams(parts[0][0], parts[1], parts[2], parts[3], parts[4], parts[5][0], su,
                        math.exp(parts[7][0]), CumHaz(like.cumhaz.jump_times, np.exp(parts[8])))
    except (ValueError, OverflowError):
        return None


def _guarded_step(params: JmParams, estep: EStep, design: ReducedDesign, cfg: EmConfig,
                  trace: "EmTrace", it: int) -> tuple[JmParams, EStep]:
    """One EM step, halved towards ``params`` while it lowers the log-likelihood."""
    proposal = m_step(params, design, estep, cfg)
    cand_e = e_step(proposal, design, cfg)
    for _ in range(cfg.max_halvings):
        if np.isfinite(cand_e.loglik) and cand_e.loglik >= estep.loglik - cfg.monotone_slack:
            break
        proposal = _blend(params, proposal, 0.5)
        cand_e = e_step(proposal, design, cfg)
    else:
        if not (np.isfinite(cand_e.loglik) and cand_e.loglik >= estep.loglik - cfg.monotone_slack):
            trace.nonmonotone_steps += 1
            logger.warning("EM step %d lowered the log-likelihood by %.3g", it,
                           estep.loglik - cand_e.loglik)
    return proposal, cand_e


def _extrapolate(history, design: ReducedDesign, cfg: EmConfig) -> tuple[JmParams, EStep] | None:
    """Squared extrapolation from three successive EM iterates.

    With ``r = x1 - x0`` and ``v = x2 - 2 x1 + x0`` the candidate is
    ``x0 - 2 a r + a^2 v`` for ``a = -|r| / |v|`` (``a = -1`` gives ``x2``).
    It is kept only if its log-likelihood is at least that of ``x2``;
    otherwise ``a`` is moved halfway towards -1 and the check repeated.
    """
    (p0, _), (p1, _), (p2, e2) = history
    jt = p2.cumhaz.jump_times
    if not all(np.array_equal(p.cumhaz.jump_times, jt) for p in (p0, p1)):
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        x0, x1, x2 = _pack(p0), _pack(p1), _pack(p2)
    if not (np.all(np.isfinite(x0)) and np.all(np.isfinite(x2))):
        return None
    r, v = x1 - x0, x2 - 2 * x1 + x0
    nv = np.linalg.norm(v)
    if nv == 0:
        return None
    a = -np.linalg.norm(r) / nv
    for _ in range(cfg.max_extrapolation_tries):
        if a > -1.0 - 1e-12:
            return None
        cand = _unpack(x0 - 2 * a * r + a * a * v, p2)
        if cand is not None:
            ce = e_step(cand, design, cfg)
            if np.isfinite(ce.loglik) and ce.loglik >= e2.loglik:
                return cand, ce
        a = 0.5 * (a - 1.0)
    return None


def em_fit(design: ReducedDesign, init: JmParams, cfg: EmConfig | None = None) -> tuple[JmParams, EmTrace]:
    """Fit the reduced joint model by EM starting from ``init``.

    Stops when the relative change of the observed-data log-likelihood falls
    below ``cfg.tol``. A step that lowers the log-likelihood by more than
    ``cfg.monotone_slack`` is halved (up to ``cfg.max_halvings`` times). With
    ``cfg.accelerate``, every two EM steps are followed by a squared
    extrapolation (see :func:`_extrapolate`) and one EM step from the
    extrapolated point. ``max_iter`` bounds the number of M-steps and the
    trace holds the log-likelihood after each of them. The returned
    parameters are the best iterate; the trace records whether the tolerance
    was reached.
    """
    cfg = cfg or EmConfig()
    _check_dims(init, design)
    trace = EmTrace()
    params = init
    estep = e_step(params, design, cfg)
    if not np.isfinite(estep.loglik):
        raise EmError("initial parameters give a non-finite log-likelihood", trace)
    trace.loglik.append(estep.loglik)
    best = (estep.loglik, params)
    history = [(params, estep)]
    it = 0
    while it < cfg.max_iter:
        it += 1
        trace.n_iter = it
        start = (params, estep)
        if cfg.accelerate and len(history) == 3:
            jump = _extrapolate(history, design, cfg)
            if jump is not None:
                start = jump
            # the next cycle starts from this step's result when it followed an extrapolation
            history = [] if jump is not None else [history[-1]]
        prev = estep.loglik
        params, estep = _guarded_step(*start, design, cfg, trace, it)
        if start[1].loglik > estep.loglik + cfg.monotone_slack:
            # extrapolated point did better than the EM step taken from it
            params, estep = start
        history.append((params, estep))
        trace.loglik.append(estep.loglik)
        trace.flagged_subjects = int(estep.flagged.sum())
        if estep.loglik > best[0]:
            best = (estep.loglik, params)
        if abs(estep.loglik - prev) <= cfg.tol * abs(prev):
            trace.converged = True
            break
    if not trace.converged:
        logger.warning("EM did not converge in %d iterations", cfg.max_iter)
        return best[1], trace
    return params, trace


def _check_dims(p: JmParams, design: ReducedDesign) -> None:
    d = design.data
    if len(p.beta1) != 1 + d.z.shape[1]:
        raise ValueError(f"beta1 needs {1 + d.z.shape[1]} entries (time slope + z)")
    if len(p.b0_coef) != design.p0 or len(p.b1_coef) != design.p1:
        raise ValueError("basis coefficients do not match the design's score columns")
    if len(p.gamma) != d.omega.shape[1]:
        raise ValueError(f"gamma needs {d.omega.shape[1]} entries")
    if p.sigma_u.shape != (d.r, d.r):
        raise ValueError(f"sigma_u must be {d.r} x {d.r}")


def initial_params(design: ReducedDesign) -> JmParams:
    """Crude starting values: OLS fixed effects, moment variance split, null survival model."""
    d = design.data
    r = d.r
    beta, *_ = np.linalg.lstsq(design.x_long, d.y, rcond=None)
    e = d.y - design.x_long @ beta
    means = np.bincount(d.subject, e, minlength=d.n) / d.counts
    within = e - means[d.subject]
    dof = max(len(e) - d.n, 1)
    s2 = max(float(np.sum(within ** 2) / dof), 1e-3 * max(float(np.var(e)), 1e-8))
    between = max(float(np.var(means) - s2 * np.mean(1.0 / d.counts)), 0.1 * float(np.var(e)), 1e-6)
    sigma_u = np.diag([between] + [0.1 * between] * (r - 1))
    ev = design.events
    jumps = ev.d / (ev.at_risk.sum(axis=0)) if ev.K else np.zeros(0)
    pz = d.z.shape[1]
    return JmParams(beta[0], beta[1:2 + pz], beta[2 + pz:], np.zeros(d.omega.shape[1]),
                    np.zeros(design.p1), 0.0, sigma_u, s2, CumHaz(ev.jump_times, jumps))


def fit_cox(design: ReducedDesign, cfg: EmConfig | None = None) -> tuple[JmParams, EmTrace]:
    """Cox regression on ``[omega, s1]`` (no longitudinal submodel)."""
    des = replace(design, longitudinal=False) if design.longitudinal else design
    init = initial_params(des)
    return em_fit(des, init, cfg)
