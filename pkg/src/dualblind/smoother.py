"""Posterior moments of states and channel samples given all observations.

The channel samples ``v_r[k], v_c[k]`` are appended to the state so that
their moments and their cross-moments with ``x[k]`` and ``x[k-1]`` come out
of ordinary forward-backward smoothing.  ``smooth`` runs a Kalman filter
and a modified Bryson-Frazier backward pass; ``dense_oracle`` conditions the
full joint Gaussian directly and is meant for checking ``smooth`` on small
problems.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from . import _kernels
from .errors import DegenerateModelError, InvalidConfigError, OversizeOracleError
from .model import ModelParams, PriorVariances

NEG_VAR_TOL = 1e-10
ORACLE_MAX_DIM = 512


@dataclass(frozen=True)
class AugmentedModel:
    """Input-augmented model on ``z = [x_r, x_c, v_r, v_c]``.

    The transition zeroes the two input slots every step (the inputs are
    white); the per-pulse process covariance is
    ``blockdiag(s2er I, s2ec I, 0, 0) + s2vr g_r g_r^T + s2vc g_c g_c^T``
    with ``g_r = [f_r, 0, 1, 0]`` and ``g_c = [0, f_c, 0, 1]``.
    """

    Abar: np.ndarray
    H: np.ndarray
    G: np.ndarray
    noise_var: np.ndarray
    sigma2_z: float

    @classmethod
    def build(cls, model: ModelParams, priors: PriorVariances) -> "AugmentedModel":
        n, K = model.n, model.K
        d = 2 * n + 2
        Abar = np.zeros((d, d))
        Abar[:n, :n] = model.A_r
        Abar[n:2 * n, n:2 * n] = model.A_c
        H = np.zeros(d)
        H[:2 * n] = model.c_out
        # z[k] = Abar z[k-1] + G[k] w[k], w[k] ~ N(0, diag(noise_var[k]))
        G = np.zeros((K, d, d))
        G[:, :2 * n, :2 * n] = np.eye(2 * n)
        G[:, :n, 2 * n] = model.F_r
        G[:, n:2 * n, 2 * n + 1] = model.F_c
        G[:, 2 * n, 2 * n] = 1.0
        G[:, 2 * n + 1, 2 * n + 1] = 1.0
        noise_var = np.zeros((K, d))
        noise_var[:, :n] = model.sigma2_er
        noise_var[:, n:2 * n] = model.sigma2_ec
        noise_var[:, 2 * n] = priors.sigma2_vr
        noise_var[:, 2 * n + 1] = priors.sigma2_vc
        return cls(Abar, H, G, noise_var, model.sigma2_z)

    @property
    def dim(self) -> int:
        return self.Abar.shape[0]

    def process_cov(self, k: int) -> np.ndarray:
        return (self.G[k] * self.noise_var[k]) @ self.G[k].T


@dataclass(frozen=True)
class PosteriorMoments:
    """Smoothed first and second moments, subsystem axis first (0=r, 1=c).

    Shapes, with ``k`` the zero-based pulse index:

    - ``m_x (2, K, n)``: E[x[k]]
    - ``P_xx (2, K, n, n)``: E[x[k] x[k]^T]
    - ``P_lag (2, K, n, n)``: E[x[k-1] x[k]^T] (zero at k=0)
    - ``m_v, m_v2 (2, K)``: E[v[k]], E[v[k]^2]
    - ``r_vx, r_vxprev (2, K, n)``: E[v[k] x[k]], E[v[k] x[k-1]]
    - ``P_rc (K, n, n)``: E[x_r[k] x_c[k]^T], needed for observation residuals

    Second moments include the mean outer products.
    """

    m_x: np.ndarray
    P_xx: np.ndarray
    P_lag: np.ndarray
    m_v: np.ndarray
    m_v2: np.ndarray
    r_vx: np.ndarray
    r_vxprev: np.ndarray
    P_rc: np.ndarray

    FAMILIES = ("m_x", "P_xx", "P_lag", "m_v", "m_v2", "r_vx", "r_vxprev")

    @property
    def K(self) -> int:
        return self.m_v.shape[1]

    @property
    def n(self) -> int:
        return self.m_x.shape[2]

    def P_xx_prev(self, s: int) -> np.ndarray:
        """E[x[k-1] x[k-1]^T] per pulse, zero at k=0."""
        out = np.zeros_like(self.P_xx[s])
        out[1:] = self.P_xx[s][:-1]
        return out

    def max_abs_diff(self, other: "PosteriorMoments") -> float:
        return max(float(np.max(np.abs(getattr(self, f) - getattr(other, f))))
                   for f in self.FAMILIES + ("P_rc",))


def _floor_variances(var, what):
    worst = float(np.min(var)) if var.size else 0.0
    if worst < -NEG_VAR_TOL:
        k = int(np.argmin(var.reshape(var.shape[0], -1).min(axis=1)))
        raise DegenerateModelError(
            f"negative posterior variance {worst:.3e} in {what} at pulse {k}", pulse=k)
    return np.maximum(var, 0.0)


def _moments_from_joint(xs, Ps, Cs, n):
    """Assemble moment families from smoothed means, covariances and
    lag-one covariances ``Cs[k] = Cov(z[k], z[k-1])``."""
    K = xs.shape[0]
    blocks = (slice(0, n), slice(n, 2 * n))
    ivs = (2 * n, 2 * n + 1)

    diag = np.einsum("kii->ki", Ps)
    np.einsum("kii->ki", Ps)[...] = _floor_variances(diag, "smoothed state")

    m_x = np.empty((2, K, n))
    P_xx = np.empty((2, K, n, n))
    P_lag = np.zeros((2, K, n, n))
    m_v = np.empty((2, K))
    m_v2 = np.empty((2, K))
    r_vx = np.empty((2, K, n))
    r_vxprev = np.zeros((2, K, n))
    for s, (b, iv) in enumerate(zip(blocks, ivs)):
        mx = xs[:, b]
        mv = xs[:, iv]
        m_x[s] = mx
        P_xx[s] = Ps[:, b, b] + mx[:, :, None] * mx[:, None, :]
        m_v[s] = mv
        m_v2[s] = Ps[:, iv, iv] + mv * mv
        r_vx[s] = Ps[:, iv, b] + mv[:, None] * mx
        # Cs[k][b, b]^T = Cov(x[k-1], x[k])
        P_lag[s, 1:] = (np.swapaxes(Cs[1:, b, b], 1, 2)
                        + mx[:-1, :, None] * mx[1:, None, :])
        r_vxprev[s, 1:] = Cs[1:, iv, b] + mv[1:, None] * mx[:-1]
    P_rc = Ps[:, :n, n:2 * n] + m_x[0][:, :, None] * m_x[1][:, None, :]
    return PosteriorMoments(m_x, P_xx, P_lag, m_v, m_v2, r_vx, r_vxprev, P_rc)


@dataclass
class ForwardPass:
    aug: AugmentedModel
    xp: np.ndarray
    Pp: np.ndarray
    xf: np.ndarray
    Pf: np.ndarray
    S: np.ndarray
    innov: np.ndarray
    gain: np.ndarray
    loglik: float


def _check_lengths(model, priors, y):
    y = np.ascontiguousarray(np.ravel(y), dtype=float)
    if y.size != model.K or priors.K != model.K:
        raise InvalidConfigError(
            f"length mismatch: K={model.K}, len(y)={y.size}, priors={priors.K}")
    return y


def forward_pass(model: ModelParams, priors: PriorVariances, y) -> ForwardPass:
    """Kalman filter on the augmented state; also yields log p(y)."""
    y = _check_lengths(model, priors, y)
    aug = AugmentedModel.build(model, priors)
    K, d = model.K, aug.dim
    xp = np.empty((K, d))
    Pp = np.empty((K, d, d))
    xf = np.empty((K, d))
    Pf = np.empty((K, d, d))
    S = np.empty(K)
    innov = np.empty(K)
    gain = np.empty((K, d))
    status, loglik = _kernels.forward_filter(
        np.ascontiguousarray(aug.Abar), np.ascontiguousarray(model.F_r),
        np.ascontiguousarray(model.F_c), model.sigma2_er, model.sigma2_ec,
        np.ascontiguousarray(priors.sigma2_vr), np.ascontiguousarray(priors.sigma2_vc),
        model.sigma2_z, aug.H, y, xp, Pp, xf, Pf, S, innov, gain)
    if status >= 0:
        raise DegenerateModelError(
            f"nonpositive innovation variance at pulse {status}", pulse=int(status))
    if not np.isfinite(loglik):
        raise DegenerateModelError("non-finite log-likelihood")
    return ForwardPass(aug, xp, Pp, xf, Pf, S, innov, gain, float(loglik))


def smooth_with_loglik(model: ModelParams, priors: PriorVariances, y):
    """``smooth`` that also returns log p(y) from the same forward pass."""
    fw = forward_pass(model, priors, y)
    K, d = model.K, fw.aug.dim
    xs = np.empty((K, d))
    Ps = np.empty((K, d, d))
    Cs = np.empty((K, d, d))
    _kernels.backward_smoother(fw.aug.Abar, fw.aug.H, fw.xp, fw.Pp, fw.Pf,
                               fw.S, fw.innov, fw.gain, xs, Ps, Cs)
    return _moments_from_joint(xs, Ps, Cs, model.n), fw.loglik


def smooth(model: ModelParams, priors: PriorVariances, y) -> PosteriorMoments:
    """Exact posterior moments via forward filtering and MBF smoothing.

    The only divisions are by scalar innovation variances.  Raises
    ``DegenerateModelError`` naming the pulse when one is nonpositive.
    """
    return smooth_with_loglik(model, priors, y)[0]


def dense_oracle(model: ModelParams, priors: PriorVariances, y) -> PosteriorMoments:
    """Brute-force posterior moments from the full joint Gaussian.

    Builds the linear map from all white inputs ``w[1..K]`` to all augmented
    states, forms the joint covariance of states and observations, and
    conditions on ``y`` with a dense solve.  Only for small problems.
    """
    y = _check_lengths(model, priors, y)
    aug = AugmentedModel.build(model, priors)
    K, d, n = model.K, aug.dim, model.n
    N = K * d
    if N > ORACLE_MAX_DIM:
        raise OversizeOracleError(
            f"dense oracle limited to K*(2n+2) <= {ORACLE_MAX_DIM}, got {N}")

    # Z = M W, block (k, j) of M is Abar^(k-j) G[j] for j <= k
    M = np.zeros((N, N))
    for k in range(K):
        for j in range(k + 1):
            M[k * d:(k + 1) * d, j * d:(j + 1) * d] = (
                np.linalg.matrix_power(aug.Abar, k - j) @ aug.G[j])
    D = aug.noise_var.ravel()
    cov_z = (M * D) @ M.T
    C = np.zeros((K, N))
    for k in range(K):
        C[k, k * d:(k + 1) * d] = aug.H
    cov_zy = cov_z @ C.T
    cov_y = C @ cov_zy + model.sigma2_z * np.eye(K)
    rhs = np.column_stack([y, cov_zy.T])
    try:
        sol = scipy.linalg.cho_solve(scipy.linalg.cho_factor(cov_y), rhs)
    except np.linalg.LinAlgError:
        # numerically singular observation covariance (sigma2_z ~ 0)
        sol = np.linalg.lstsq(cov_y, rhs, rcond=None)[0]
    mean = cov_zy @ sol[:, 0]
    cov = cov_z - cov_zy @ sol[:, 1:]
    cov = 0.5 * (cov + cov.T)

    xs = mean.reshape(K, d)
    Ps = np.empty((K, d, d))
    Cs = np.zeros((K, d, d))
    for k in range(K):
        Ps[k] = cov[k * d:(k + 1) * d, k * d:(k + 1) * d]
        if k:
            Cs[k] = cov[k * d:(k + 1) * d, (k - 1) * d:k * d]
    return _moments_from_joint(xs, Ps, Cs, n)
