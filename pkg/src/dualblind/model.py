"""Dual-subsystem linear state-space model of the overlaid ISAC receiver.

Two companion-form systems (radar ``r`` and communications ``c``) are driven
by sparse scalar channel sequences through per-pulse input vectors::

    x_r[k] = A_r x_r[k-1] + f_r[k] h_r[k] + e_r[k]
    x_c[k] = A_c x_c[k-1] + f_c[k] h_c[k] + e_c[k]
    y[k]   = c_out . [x_r[k]; x_c[k]] + z[k]

with ``x_r[0] = x_c[0] = 0``.  Everything is real-valued.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Union

import numpy as np

from .errors import InvalidConfigError


def make_companion(coeffs) -> np.ndarray:
    """Companion matrix with ones on the first superdiagonal and ``coeffs``
    in the last row.

    >>> make_companion([2.0, 4.0])
    array([[0., 1.],
           [2., 4.]])
    """
    a = np.asarray(coeffs, dtype=float).ravel()
    n = a.size
    if n < 1:
        raise InvalidConfigError("companion matrix needs at least one coefficient")
    A = np.eye(n, k=1)
    A[-1, :] = a
    return A


def is_companion(A: np.ndarray, atol: float = 0.0) -> bool:
    """Entrywise check of the companion structure (last row unconstrained)."""
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        return False
    n = A.shape[0]
    if n == 1:
        return True
    expected = np.eye(n, k=1)
    return bool(np.all(np.abs(A[:-1] - expected[:-1]) <= atol))


def companion_coeffs(A: np.ndarray) -> np.ndarray:
    return np.array(A[-1], dtype=float)


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True)
class ModelParams:
    """All deterministic system quantities of the two-subsystem model.

    ``F_r`` and ``F_c`` hold one input vector per pulse, shape ``(K, n)``.
    ``c_out`` is the observation row over the stacked state ``[x_r; x_c]``;
    it defaults to all ones.
    """

    A_r: np.ndarray
    A_c: np.ndarray
    F_r: np.ndarray
    F_c: np.ndarray
    sigma2_er: float = 0.0
    sigma2_ec: float = 0.0
    sigma2_z: float = 0.0
    c_out: Optional[np.ndarray] = None

    def __post_init__(self):
        A_r = _frozen(np.atleast_2d(self.A_r))
        A_c = _frozen(np.atleast_2d(self.A_c))
        n = A_r.shape[0]
        if A_r.shape != (n, n) or A_c.shape != (n, n):
            raise InvalidConfigError(
                f"state matrices must both be n x n, got {A_r.shape} and {A_c.shape}")
        for name, A in (("A_r", A_r), ("A_c", A_c)):
            if not is_companion(A):
                raise InvalidConfigError(f"{name} is not in companion form")
        F_r = _frozen(self.F_r)
        F_c = _frozen(self.F_c)
        if F_r.ndim != 2 or F_r.shape[1] != n or F_c.shape != F_r.shape:
            raise InvalidConfigError(
                f"input sequences must be (K, {n}), got {F_r.shape} and {F_c.shape}")
        if F_r.shape[0] < 1:
            raise InvalidConfigError("K must be >= 1")
        c_out = np.ones(2 * n) if self.c_out is None else self.c_out
        c_out = _frozen(np.ravel(c_out))
        if c_out.shape != (2 * n,):
            raise InvalidConfigError(f"c_out must have length {2 * n}, got {c_out.size}")
        for name in ("sigma2_er", "sigma2_ec", "sigma2_z"):
            v = float(getattr(self, name))
            if not v >= 0.0:
                raise InvalidConfigError(f"{name} must be >= 0, got {v}")
            object.__setattr__(self, name, v)
        for name, v in (("A_r", A_r), ("A_c", A_c), ("F_r", F_r), ("F_c", F_c), ("c_out", c_out)):
            if not np.all(np.isfinite(v)):
                raise InvalidConfigError(f"{name} contains non-finite values")
            object.__setattr__(self, name, v)

    @property
    def n(self) -> int:
        return self.A_r.shape[0]

    @property
    def K(self) -> int:
        return self.F_r.shape[0]

    def with_(self, **changes) -> "ModelParams":
        return replace(self, **changes)


@dataclass(frozen=True)
class ChannelPair:
    """Radar and communications channel sequences, each of length K."""

    h_r: np.ndarray
    h_c: np.ndarray

    def __post_init__(self):
        h_r = _frozen(np.ravel(self.h_r))
        h_c = _frozen(np.ravel(self.h_c))
        if h_r.shape != h_c.shape:
            raise InvalidConfigError(
                f"channel lengths differ: {h_r.size} vs {h_c.size}")
        object.__setattr__(self, "h_r", h_r)
        object.__setattr__(self, "h_c", h_c)

    @property
    def K(self) -> int:
        return self.h_r.size

    @property
    def L(self) -> int:
        return int(np.count_nonzero(self.h_r))

    @property
    def Q(self) -> int:
        return int(np.count_nonzero(self.h_c))

    def swapped(self) -> "ChannelPair":
        return ChannelPair(self.h_c, self.h_r)


@dataclass(frozen=True)
class Trajectory:
    x_r: np.ndarray
    x_c: np.ndarray
    y: np.ndarray

    @property
    def K(self) -> int:
        return self.y.size


@dataclass(frozen=True)
class PriorVariances:
    """Per-pulse Gaussian prior variances of the two channel sequences.

    A zero entry pins the corresponding channel sample to zero; the EM
    variance update can never move it away from zero again.
    """

    sigma2_vr: np.ndarray
    sigma2_vc: np.ndarray

    def __post_init__(self):
        vr = _frozen(np.ravel(self.sigma2_vr))
        vc = _frozen(np.ravel(self.sigma2_vc))
        if vr.shape != vc.shape:
            raise InvalidConfigError("prior variance sequences differ in length")
        if np.any(~(vr >= 0.0)) or np.any(~(vc >= 0.0)):
            raise InvalidConfigError("prior variances must be >= 0")
        object.__setattr__(self, "sigma2_vr", vr)
        object.__setattr__(self, "sigma2_vc", vc)

    @classmethod
    def constant(cls, K: int, value: float = 1.0) -> "PriorVariances":
        return cls(np.full(K, float(value)), np.full(K, float(value)))

    @property
    def K(self) -> int:
        return self.sigma2_vr.size


AmpDist = Union[str, Callable[[np.random.Generator, int], np.ndarray]]


def _draw_amplitudes(rng, size, amp_dist):
    if callable(amp_dist):
        return np.asarray(amp_dist(rng, size), dtype=float)
    if amp_dist == "normal":
        return rng.standard_normal(size)
    if amp_dist == "uniform":
        # magnitudes bounded away from zero, random sign
        return rng.uniform(0.5, 1.5, size) * rng.choice([-1.0, 1.0], size)
    raise InvalidConfigError(f"unknown amplitude distribution {amp_dist!r}")


def _stable_companion(rng, n, max_radius, max_tries=100_000):
    for _ in range(max_tries):
        a = rng.uniform(-1.0, 1.0, n)
        A = make_companion(a)
        if max_radius is None or np.max(np.abs(np.linalg.eigvals(A))) < max_radius:
            return A
    raise InvalidConfigError(
        f"could not draw a companion matrix with spectral radius < {max_radius}")


def _sparse_channel(rng, K, L, amp_dist):
    h = np.zeros(K)
    if L:
        idx = rng.choice(K, size=L, replace=False)
        amps = _draw_amplitudes(rng, L, amp_dist)
        # a drawn amplitude of exactly zero would break ||h||_0 = L
        amps[amps == 0.0] = 1.0
        h[idx] = amps
    return h


def generate_scene(n: int, K: int, L: int, Q: int, amp_dist: AmpDist = "normal",
                   seed: int = 0, *, sigma2_er: float = 0.0, sigma2_ec: float = 0.0,
                   sigma2_z: float = 0.0, max_radius: Optional[float] = 1.0,
                   c_out=None) -> tuple[ModelParams, ChannelPair]:
    """Random scene: companion matrices, Gaussian input vectors, sparse channels.

    Companion coefficients are i.i.d. U(-1, 1); draws whose spectral radius
    is not below ``max_radius`` are rejected (``None`` disables the check).
    Spike locations are uniform without replacement.
    """
    if n < 1 or K < 1:
        raise InvalidConfigError(f"need n >= 1 and K >= 1, got n={n}, K={K}")
    if L < 0 or Q < 0:
        raise InvalidConfigError("support sizes must be nonnegative")
    if L > K or Q > K:
        raise InvalidConfigError(f"support sizes L={L}, Q={Q} exceed K={K}")
    if L > K / 10 or Q > K / 10:
        raise InvalidConfigError(
            f"channels must be sparse: L={L}, Q={Q} must not exceed K/10={K / 10:g}")
    rng = np.random.default_rng(seed)
    A_r = _stable_companion(rng, n, max_radius)
    A_c = _stable_companion(rng, n, max_radius)
    F_r = rng.standard_normal((K, n))
    F_c = rng.standard_normal((K, n))
    h_r = _sparse_channel(rng, K, L, amp_dist)
    h_c = _sparse_channel(rng, K, Q, amp_dist)
    model = ModelParams(A_r, A_c, F_r, F_c, sigma2_er, sigma2_ec, sigma2_z, c_out)
    return model, ChannelPair(h_r, h_c)


def simulate(model: ModelParams, channels: ChannelPair, seed: int = 0) -> Trajectory:
    """Run the state recursions for k = 1..K from the zero initial state.

    All noise is drawn up front from ``seed`` so that the draws do not
    depend on the parameters; rescaling ``(F, h) -> (beta F, h / beta)``
    therefore leaves ``y`` unchanged.
    """
    n, K = model.n, model.K
    if channels.K != K:
        raise InvalidConfigError(f"channel length {channels.K} does not match K={K}")
    rng = np.random.default_rng(seed)
    e_r = rng.standard_normal((K, n)) * np.sqrt(model.sigma2_er)
    e_c = rng.standard_normal((K, n)) * np.sqrt(model.sigma2_ec)
    z = rng.standard_normal(K) * np.sqrt(model.sigma2_z)

    u_r = model.F_r * channels.h_r[:, None] + e_r
    u_c = model.F_c * channels.h_c[:, None] + e_c
    x_r = np.empty((K, n))
    x_c = np.empty((K, n))
    prev_r = np.zeros(n)
    prev_c = np.zeros(n)
    for k in range(K):
        prev_r = model.A_r @ prev_r + u_r[k]
        prev_c = model.A_c @ prev_c + u_c[k]
        x_r[k] = prev_r
        x_c[k] = prev_c
    y = x_r @ model.c_out[:n] + x_c @ model.c_out[n:] + z
    return Trajectory(_frozen(x_r), _frozen(x_c), _frozen(y))


def log_marginal_likelihood(model: ModelParams, priors: PriorVariances, y) -> float:
    """Exact log p(y) with states and channel samples integrated out.

    Evaluated through the prediction-error decomposition of the forward
    filter, i.e. as a sum of scalar Gaussian innovation log-densities.
    """
    from .smoother import forward_pass

    return forward_pass(model, priors, y).loglik
