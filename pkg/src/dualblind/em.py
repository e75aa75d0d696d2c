"""Sparsity-promoting EM for the two-subsystem model.

Each iteration smooths with the current parameters (E-step) and then
updates, in closed form: the per-pulse prior variances, the companion last
rows, the input vectors and optionally the observation-noise variance.
Prior variances that reach zero stay there, which is what prunes the
channel sequences down to a few spikes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg

from .errors import DegenerateModelError, IllConditionedMStepError, InvalidConfigError
from .model import ModelParams, PriorVariances, make_companion
from .smoother import PosteriorMoments, smooth_with_loglik

log = logging.getLogger(__name__)

MV2_FLOOR = 1e-14
REG_EIG_THRESHOLD = 1e-12
REG_SCALE = 1e-10

INPUT_MODES = ("per-pulse", "tied")
INIT_POLICIES = ("random", "zeros")


@dataclass(frozen=True)
class EmConfig:
    """EM settings.

    ``sigma2_er``/``sigma2_ec`` are fixed model constants, never estimated.
    ``sigma2_z`` is required unless ``estimate_sigma2_z`` is set, in which
    case it only seeds the estimate (sample variance of ``y`` when None).
    """

    max_iters: int = 100
    rel_tol: float = 1e-9
    init: str = "random"
    input_mode: str = "per-pulse"
    estimate_sigma2_z: bool = False
    seed: int = 0
    sigma2_er: float = 1e-4
    sigma2_ec: float = 1e-4
    sigma2_z: Optional[float] = None
    init_sigma2_v: float = 1.0
    c_out: Optional[tuple] = None

    def __post_init__(self):
        if self.max_iters < 1:
            raise InvalidConfigError("max_iters must be >= 1")
        if not self.rel_tol > 0:
            raise InvalidConfigError("rel_tol must be > 0")
        if self.init not in INIT_POLICIES:
            raise InvalidConfigError(f"init must be one of {INIT_POLICIES}, got {self.init!r}")
        if self.input_mode not in INPUT_MODES:
            raise InvalidConfigError(
                f"input_mode must be one of {INPUT_MODES}, got {self.input_mode!r}")
        if self.sigma2_z is None and not self.estimate_sigma2_z:
            raise InvalidConfigError("sigma2_z must be given unless it is estimated")
        for name in ("sigma2_er", "sigma2_ec", "init_sigma2_v"):
            if not getattr(self, name) >= 0:
                raise InvalidConfigError(f"{name} must be >= 0")
        if self.sigma2_z is not None and not self.sigma2_z >= 0:
            raise InvalidConfigError("sigma2_z must be >= 0")


@dataclass
class EmReport:
    """Outcome of ``em_fit``.

    ``loglik[i]`` is log p(y) at the i-th parameter iterate (index 0 is the
    initialization), so ``len(loglik) == iters + 1``.  The channel estimates
    are the posterior means from the last E-step.
    """

    loglik: list
    model: ModelParams
    priors: PriorVariances
    h_r_hat: np.ndarray
    h_c_hat: np.ndarray
    iters: int
    stop_reason: str
    pinned_pulses: list = field(default_factory=list)
    regularized_msteps: int = 0
    wall_ms: float = 0.0

    @property
    def a_r_hat(self) -> np.ndarray:
        return np.array(self.model.A_r[-1])

    @property
    def a_c_hat(self) -> np.ndarray:
        return np.array(self.model.A_c[-1])

    @property
    def sigma2_z_hat(self) -> float:
        return self.model.sigma2_z

    def to_dict(self) -> dict:
        return {
            "iters": self.iters,
            "stop_reason": self.stop_reason,
            "loglik": [float(v) for v in self.loglik],
            "h_r_hat": self.h_r_hat.tolist(),
            "h_c_hat": self.h_c_hat.tolist(),
            "a_r_hat": self.a_r_hat.tolist(),
            "a_c_hat": self.a_c_hat.tolist(),
            "sigma2_z_hat": float(self.sigma2_z_hat),
            "diagnostics": {
                "pinned_pulses": [int(k) for k in self.pinned_pulses],
                "regularized_msteps": int(self.regularized_msteps),
            },
        }


def update_variances(moments: PosteriorMoments) -> PriorVariances:
    """New prior variances: the posterior second moments E[v[k]^2]."""
    return PriorVariances(moments.m_v2[0].copy(), moments.m_v2[1].copy())


def update_inputs(moments: PosteriorMoments, A_hat_r, A_hat_c, mode="per-pulse",
                  previous=None):
    """Input vectors maximizing the expected complete-data likelihood for
    the given state matrices.

    Per-pulse: ``f[k] = (E[v x[k]] - A E[v x[k-1]]) / E[v^2]``.  Tied mode
    shares one vector across pulses and pools the three sums.  Pulses whose
    E[v^2] is below ``MV2_FLOOR`` carry no information about ``f[k]``; they
    keep the value from ``previous`` (zeros if not given).
    """
    if mode not in INPUT_MODES:
        raise InvalidConfigError(f"unknown input mode {mode!r}")
    K, n = moments.K, moments.n
    out = []
    for s, A in enumerate((A_hat_r, A_hat_c)):
        A = np.asarray(A, dtype=float)
        r_vx = moments.r_vx[s]
        r_prev = moments.r_vxprev[s]
        m_v2 = moments.m_v2[s]
        if previous is None:
            F = np.zeros((K, n))
        else:
            F = np.array(previous[s], dtype=float, copy=True)
        if mode == "tied":
            total = m_v2.sum()
            if total >= MV2_FLOOR:
                f = (r_vx.sum(axis=0) - A @ r_prev.sum(axis=0)) / total
                F[:] = f
        else:
            ok = m_v2 >= MV2_FLOOR
            num = r_vx[ok] - r_prev[ok] @ A.T
            F[ok] = num / m_v2[ok, None]
        out.append(F)
    return out[0], out[1]


def pinned_pulses(moments: PosteriorMoments) -> np.ndarray:
    """Pulses where either channel's E[v^2] is below the floor."""
    return np.flatnonzero((moments.m_v2 < MV2_FLOOR).any(axis=0))


def accumulate_mstep_matrices(moments: PosteriorMoments, s: int, mode="per-pulse"):
    """Normal-equation matrices ``(V_A, Lam_A)`` for subsystem ``s`` (0=r, 1=c).

    The input vectors are profiled out, which adds the rank-one corrections
    ``E[v x[k-1]] E[v x[.]]^T / E[v^2]``; pulses below the E[v^2] floor get
    no correction.
    """
    r_prev = moments.r_vxprev[s]
    r_vx = moments.r_vx[s]
    m_v2 = moments.m_v2[s]
    V = moments.P_xx_prev(s).sum(axis=0)
    Lam = moments.P_lag[s].sum(axis=0)
    if mode == "tied":
        total = m_v2.sum()
        if total >= MV2_FLOOR:
            sp = r_prev.sum(axis=0)
            V = V - np.outer(sp, sp) / total
            Lam = Lam - np.outer(sp, r_vx.sum(axis=0)) / total
    else:
        ok = m_v2 >= MV2_FLOOR
        w = 1.0 / m_v2[ok]
        V = V - np.einsum("k,ki,kj->ij", w, r_prev[ok], r_prev[ok])
        Lam = Lam - np.einsum("k,ki,kj->ij", w, r_prev[ok], r_vx[ok])
    return 0.5 * (V + V.T), Lam


def solve_companion(V, Lam, return_info=False):
    """Last-row coefficients minimizing ``Tr(A V A^T - 2 A Lam)`` over
    companion matrices ``A``.

    The fixed superdiagonal rows do not interact with the last row, so the
    optimum is ``V^{-1} Lam e_n``, computed with a Cholesky solve.  A small
    ridge is added when ``V`` is numerically singular.
    """
    V = 0.5 * (np.asarray(V, dtype=float) + np.asarray(V, dtype=float).T)
    Lam = np.asarray(Lam, dtype=float)
    n = V.shape[0]
    rhs = Lam[:, -1]
    regularized = False
    if np.linalg.eigvalsh(V)[0] < REG_EIG_THRESHOLD:
        V = V + REG_SCALE * np.trace(V) / n * np.eye(n)
        regularized = True
    try:
        a = scipy.linalg.cho_solve(scipy.linalg.cho_factor(V), rhs)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedMStepError(
            "companion normal equations are singular after regularization") from exc
    if not np.all(np.isfinite(a)):
        raise IllConditionedMStepError("companion solve produced non-finite values")
    if return_info:
        return a, regularized
    return a


def update_sigma2_z(moments: PosteriorMoments, y, c_out) -> float:
    """Mean expected squared observation residual, E[(y - c x)^2]."""
    y = np.ravel(y)
    n = moments.n
    c = np.asarray(c_out, dtype=float)
    c_r, c_c = c[:n], c[n:]
    pred = moments.m_x[0] @ c_r + moments.m_x[1] @ c_c
    second = (np.einsum("i,kij,j->k", c_r, moments.P_xx[0], c_r)
              + np.einsum("i,kij,j->k", c_c, moments.P_xx[1], c_c)
              + 2.0 * np.einsum("i,kij,j->k", c_r, moments.P_rc, c_c))
    resid2 = y * y - 2.0 * y * pred + second
    return max(float(np.mean(resid2)), 0.0)


def initialize(y, n: int, config: EmConfig):
    """Starting parameters: zero companion rows, unit prior variances and
    either seeded standard-normal or all-zero input vectors."""
    y = np.ravel(np.asarray(y, dtype=float))
    K = y.size
    rng = np.random.default_rng(config.seed)
    if config.init == "zeros":
        F_r = np.zeros((K, n))
        F_c = np.zeros((K, n))
    elif config.input_mode == "tied":
        # start inside the tied family, otherwise EM ascent is not guaranteed
        F_r = np.tile(rng.standard_normal(n), (K, 1))
        F_c = np.tile(rng.standard_normal(n), (K, 1))
    else:
        F_r = rng.standard_normal((K, n))
        F_c = rng.standard_normal((K, n))
    if config.estimate_sigma2_z and config.sigma2_z is None:
        sigma2_z = float(np.var(y))
    else:
        sigma2_z = float(config.sigma2_z)
    model = ModelParams(make_companion(np.zeros(n)), make_companion(np.zeros(n)),
                        F_r, F_c, config.sigma2_er, config.sigma2_ec, sigma2_z,
                        config.c_out)
    return model, PriorVariances.constant(K, config.init_sigma2_v)


def m_step(moments: PosteriorMoments, model: ModelParams, y, config: EmConfig):
    """One full M-step. Returns ``(model, priors, regularized_count)``."""
    priors = update_variances(moments)
    coeffs = []
    n_reg = 0
    for s in (0, 1):
        V, Lam = accumulate_mstep_matrices(moments, s, config.input_mode)
        a, reg = solve_companion(V, Lam, return_info=True)
        coeffs.append(a)
        n_reg += reg
    A_r, A_c = make_companion(coeffs[0]), make_companion(coeffs[1])
    F_r, F_c = update_inputs(moments, A_r, A_c, config.input_mode,
                             previous=(model.F_r, model.F_c))
    changes = dict(A_r=A_r, A_c=A_c, F_r=F_r, F_c=F_c)
    if config.estimate_sigma2_z:
        changes["sigma2_z"] = update_sigma2_z(moments, y, model.c_out)
    return model.with_(**changes), priors, n_reg


def _e_step(model, priors, y, it):
    try:
        moments, ll = smooth_with_loglik(model, priors, y)
    except DegenerateModelError as exc:
        exc.iteration = it
        raise
    if not np.isfinite(ll) or not np.all(np.isfinite(moments.m_v2)):
        raise DegenerateModelError(f"NaN or inf in E-step at iteration {it}", iteration=it)
    return moments, ll


def em_fit(y, n: int, config: EmConfig, init=None) -> EmReport:
    """Fit all unknowns to the observation sequence ``y``.

    ``init`` optionally overrides ``initialize`` with a ``(ModelParams,
    PriorVariances)`` pair.  Stops after ``config.max_iters`` M-steps or when
    the relative log-likelihood gain drops below ``config.rel_tol``.
    """
    import time

    t0 = time.perf_counter()
    y = np.ravel(np.asarray(y, dtype=float))
    if y.size < 2:
        raise InvalidConfigError("need at least two observations")
    model, priors = init if init is not None else initialize(y, n, config)

    moments, ll = _e_step(model, priors, y, 0)
    lls = [ll]
    n_reg = 0
    stop = "max_iters"
    it = 0
    while it < config.max_iters:
        model, priors, reg = m_step(moments, model, y, config)
        n_reg += reg
        it += 1
        moments, ll = _e_step(model, priors, y, it)
        lls.append(ll)
        log.debug("iter %d loglik %.12g", it, ll)
        if ll - lls[-2] < config.rel_tol * abs(lls[-2]):
            stop = "converged"
            break

    return EmReport(
        loglik=lls, model=model, priors=priors,
        h_r_hat=moments.m_v[0].copy(), h_c_hat=moments.m_v[1].copy(),
        iters=it, stop_reason=stop,
        pinned_pulses=pinned_pulses(moments).tolist(),
        regularized_msteps=n_reg,
        wall_ms=(time.perf_counter() - t0) * 1e3)
