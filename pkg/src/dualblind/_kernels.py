"""Compiled inner loops for the forward filter and the backward smoother.

The state handled here is the input-augmented stack
``z = [x_r (n), x_c (n), v_r, v_c]`` of dimension ``d = 2n + 2``.  The
observation is the scalar ``H z`` with ``H = [c_out, 0, 0]``, so every
gain computation divides by a scalar innovation variance only.

Kernels return an integer status instead of raising: ``-1`` on success,
otherwise the zero-based pulse at which a nonpositive innovation variance
was met.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def _process_cov(Q, n, f_r, f_c, s2er, s2ec, s2vr, s2vc):
    d = 2 * n + 2
    for i in range(d):
        for j in range(d):
            Q[i, j] = 0.0
    for i in range(n):
        Q[i, i] = s2er
        Q[n + i, n + i] = s2ec
    # rank-one terms from g_r = [f_r, 0, 1, 0] and g_c = [0, f_c, 0, 1]
    ir = 2 * n
    ic = 2 * n + 1
    for i in range(n):
        for j in range(n):
            Q[i, j] += s2vr * f_r[i] * f_r[j]
            Q[n + i, n + j] += s2vc * f_c[i] * f_c[j]
        Q[i, ir] += s2vr * f_r[i]
        Q[ir, i] += s2vr * f_r[i]
        Q[n + i, ic] += s2vc * f_c[i]
        Q[ic, n + i] += s2vc * f_c[i]
    Q[ir, ir] += s2vr
    Q[ic, ic] += s2vc


@njit(cache=True, nogil=True)
def _symmetrize(P):
    d = P.shape[0]
    for i in range(d):
        for j in range(i + 1, d):
            s = 0.5 * (P[i, j] + P[j, i])
            P[i, j] = s
            P[j, i] = s


@njit(cache=True, nogil=True)
def forward_filter(Abar, F_r, F_c, s2er, s2ec, s2vr, s2vc, s2z, H, y,
                   xp, Pp, xf, Pf, S, innov, gain):
    """Kalman filter from the known initial state ``z[0] = 0``.

    Fills predicted (``xp``, ``Pp``) and filtered (``xf``, ``Pf``) moments,
    innovation variances ``S``, innovations and gains.  Returns
    ``(status, loglik)``.
    """
    K = y.shape[0]
    d = Abar.shape[0]
    n = (d - 2) // 2
    Q = np.zeros((d, d))
    tmp = np.zeros((d, d))
    ph = np.zeros(d)
    ikh = np.zeros((d, d))
    loglik = 0.0
    for k in range(K):
        _process_cov(Q, n, F_r[k], F_c[k], s2er, s2ec, s2vr[k], s2vc[k])
        if k == 0:
            for i in range(d):
                xp[k, i] = 0.0
                for j in range(d):
                    Pp[k, i, j] = Q[i, j]
        else:
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += Abar[i, j] * xf[k - 1, j]
                xp[k, i] = acc
            for i in range(d):
                for j in range(d):
                    acc = 0.0
                    for m in range(d):
                        acc += Abar[i, m] * Pf[k - 1, m, j]
                    tmp[i, j] = acc
            for i in range(d):
                for j in range(d):
                    acc = Q[i, j]
                    for m in range(d):
                        acc += tmp[i, m] * Abar[j, m]
                    Pp[k, i, j] = acc
            _symmetrize(Pp[k])

        # scalar innovation
        pred = 0.0
        for i in range(d):
            pred += H[i] * xp[k, i]
        for i in range(d):
            acc = 0.0
            for j in range(d):
                acc += Pp[k, i, j] * H[j]
            ph[i] = acc
        s = s2z
        for i in range(d):
            s += H[i] * ph[i]
        if not s > 0.0:
            return k, loglik
        S[k] = s
        e = y[k] - pred
        innov[k] = e
        loglik += -0.5 * (np.log(2.0 * np.pi * s) + e * e / s)
        for i in range(d):
            gain[k, i] = ph[i] / s
            xf[k, i] = xp[k, i] + gain[k, i] * e

        # Joseph form: (I - gH) Pp (I - gH)^T + s2z g g^T
        for i in range(d):
            for j in range(d):
                ikh[i, j] = -gain[k, i] * H[j]
            ikh[i, i] += 1.0
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for m in range(d):
                    acc += ikh[i, m] * Pp[k, m, j]
                tmp[i, j] = acc
        for i in range(d):
            for j in range(d):
                acc = s2z * gain[k, i] * gain[k, j]
                for m in range(d):
                    acc += tmp[i, m] * ikh[j, m]
                Pf[k, i, j] = acc
        _symmetrize(Pf[k])
    return -1, loglik


@njit(cache=True, nogil=True)
def _matmul(out, A, B):
    d = A.shape[0]
    for i in range(d):
        for j in range(d):
            acc = 0.0
            for m in range(d):
                acc += A[i, m] * B[m, j]
            out[i, j] = acc


@njit(cache=True, nogil=True)
def backward_smoother(Abar, H, xp, Pp, Pf, S, innov, gain, xs, Ps, Cs):
    """Modified Bryson-Frazier backward pass.

    Propagates the adjoint pair (lambda, Lambda) instead of inverting any
    state covariance.  Writes smoothed means ``xs``, covariances ``Ps`` and
    lag-one covariances ``Cs[k] = Cov(z[k], z[k-1] | y)`` (zero at k=0).

    Moments are formed from the filtered side,
    ``xs = xf - Pf lam_t`` and ``Ps = Pf - Pf Lam_t Pf``, which equals the
    predicted-side form but avoids cancelling against the ``1/S[k]`` term
    when an innovation variance is tiny.
    """
    K = xp.shape[0]
    d = Abar.shape[0]
    lam_t = np.zeros(d)
    Lam_t = np.zeros((d, d))
    lam_h = np.zeros(d)
    Lam_h = np.zeros((d, d))
    ikh = np.zeros((d, d))
    tmp = np.zeros((d, d))
    tmp2 = np.zeros((d, d))
    tmp3 = np.zeros((d, d))
    for k in range(K - 1, -1, -1):
        Pfk = Pf[k]
        for i in range(d):
            acc = 0.0
            for m in range(d):
                acc += Pfk[i, m] * lam_t[m]
            xs[k, i] = xp[k, i] + gain[k, i] * innov[k] - acc
        # tmp = Pf Lam_tilde
        _matmul(tmp, Pfk, Lam_t)
        for i in range(d):
            for j in range(d):
                acc = Pfk[i, j]
                for m in range(d):
                    acc -= tmp[i, m] * Pfk[m, j]
                Ps[k, i, j] = acc
        _symmetrize(Ps[k])

        for i in range(d):
            for j in range(d):
                ikh[i, j] = -gain[k, i] * H[j]
            ikh[i, i] += 1.0
        if k == 0:
            for i in range(d):
                for j in range(d):
                    Cs[k, i, j] = 0.0
        else:
            # Cs = (I - Pf Lam_tilde)(I - g H) Abar Pf[k-1]
            _matmul(tmp2, Abar, Pf[k - 1])
            _matmul(tmp3, ikh, tmp2)
            for i in range(d):
                for j in range(d):
                    acc = tmp3[i, j]
                    for m in range(d):
                        acc -= tmp[i, m] * tmp3[m, j]
                    Cs[k, i, j] = acc

        # lam_hat = -H^T e / S + ikh^T lam_tilde
        for i in range(d):
            acc = -H[i] * innov[k] / S[k]
            for m in range(d):
                acc += ikh[m, i] * lam_t[m]
            lam_h[i] = acc
        # Lam_hat = H^T H / S + ikh^T Lam_tilde ikh
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for m in range(d):
                    acc += ikh[m, i] * Lam_t[m, j]
                tmp[i, j] = acc
        for i in range(d):
            for j in range(d):
                acc = H[i] * H[j] / S[k]
                for m in range(d):
                    acc += tmp[i, m] * ikh[m, j]
                Lam_h[i, j] = acc
        _symmetrize(Lam_h)

        # step the adjoint back through the transition
        for i in range(d):
            acc = 0.0
            for m in range(d):
                acc += Abar[m, i] * lam_h[m]
            lam_t[i] = acc
        for i in range(d):
            for j in range(d):
                acc = 0.0
                for m in range(d):
                    acc += Abar[m, i] * Lam_h[m, j]
                tmp[i, j] = acc
        _matmul(Lam_t, tmp, Abar)
