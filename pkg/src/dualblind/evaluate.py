"""Recovery metrics and the scripted recovery experiments.

Channel estimates are only defined up to a scalar factor and up to
swapping the radar and communications labels, so every score is reported
both raw and after least-squares scalar alignment, for the better of the
two label assignments.
"""

from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .em import EmConfig, EmReport, em_fit
from .errors import DualBlindError, InvalidConfigError
from .model import ChannelPair, ModelParams, Trajectory, generate_scene, simulate

log = logging.getLogger(__name__)

NOISELESS_SIGMA2_Z = 1e-12
FIG3_SUPPORT_THRESHOLD = 0.8
DEGRADED_FAILURE_FRACTION = 0.2

CSV_COLUMNS = ("K", "sigma2_z", "trial", "seed", "raw_l2_r", "raw_l2_c",
               "aligned_l2_r", "aligned_l2_c", "support_hit_r", "support_hit_c",
               "assignment", "iters", "wall_ms")


def align_scale(h_true, h_est):
    """Least-squares scalar ``beta`` fitting ``h_true`` by ``beta * h_est``.

    Returns ``(beta, ||h_true - beta h_est||)``; ``beta = 0`` when the
    estimate is identically zero.
    """
    h_true = np.ravel(np.asarray(h_true, dtype=float))
    h_est = np.ravel(np.asarray(h_est, dtype=float))
    denom = float(h_est @ h_est)
    if denom == 0.0:
        return 0.0, float(np.linalg.norm(h_true))
    beta = float(h_true @ h_est) / denom
    return beta, float(np.linalg.norm(h_true - beta * h_est))


def support_hit(h_true, h_est) -> float:
    """Fraction of the true spike indices among the top-|support| entries
    of ``|h_est|``."""
    h_true = np.ravel(h_true)
    support = np.flatnonzero(h_true)
    if support.size == 0:
        return 1.0
    # stable sort so ties resolve by index, keeping runs reproducible
    top = np.argsort(-np.abs(np.ravel(h_est)), kind="stable")[:support.size]
    return float(np.intersect1d(support, top).size) / support.size


@dataclass(frozen=True)
class RecoveryMetrics:
    raw_l2_r: float
    raw_l2_c: float
    aligned_l2_r: float
    aligned_l2_c: float
    support_hit_r: float
    support_hit_c: float
    assignment: str

    @property
    def aligned_total(self) -> float:
        return self.aligned_l2_r + self.aligned_l2_c

    def as_dict(self) -> dict:
        return {
            "raw_l2_r": self.raw_l2_r, "raw_l2_c": self.raw_l2_c,
            "aligned_l2_r": self.aligned_l2_r, "aligned_l2_c": self.aligned_l2_c,
            "support_hit_r": self.support_hit_r, "support_hit_c": self.support_hit_c,
            "assignment": self.assignment,
        }


def _metrics(h_r, h_c, est_r, est_c, label):
    return RecoveryMetrics(
        raw_l2_r=float(np.linalg.norm(h_r - est_r)),
        raw_l2_c=float(np.linalg.norm(h_c - est_c)),
        aligned_l2_r=align_scale(h_r, est_r)[1],
        aligned_l2_c=align_scale(h_c, est_c)[1],
        support_hit_r=support_hit(h_r, est_r),
        support_hit_c=support_hit(h_c, est_c),
        assignment=label,
    )


def score(channels_true: ChannelPair, report) -> RecoveryMetrics:
    """Score a fit against the true channels under the better labeling.

    ``report`` is an ``EmReport`` or anything with ``h_r_hat``/``h_c_hat``
    (a ``ChannelPair`` works too).  Ties go to the direct assignment.
    """
    if hasattr(report, "h_r_hat"):
        est_r, est_c = np.ravel(report.h_r_hat), np.ravel(report.h_c_hat)
    else:
        est_r, est_c = np.ravel(report.h_r), np.ravel(report.h_c)
    h_r, h_c = channels_true.h_r, channels_true.h_c
    if est_r.shape != h_r.shape or est_c.shape != h_c.shape:
        raise InvalidConfigError("estimate and truth lengths differ")
    direct = _metrics(h_r, h_c, est_r, est_c, "direct")
    swapped = _metrics(h_r, h_c, est_c, est_r, "swapped")
    return swapped if swapped.aligned_total < direct.aligned_total else direct


def derive_seeds(master: int, count: int) -> list[int]:
    """Independent 63-bit child seeds from one master seed."""
    ss = np.random.SeedSequence(master)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
            for c in ss.spawn(count)]


@dataclass
class RecoveryRun:
    """Everything one scene-simulate-fit-score pass produces."""

    seed: int
    model: ModelParams
    channels: ChannelPair
    trajectory: Trajectory
    report: EmReport
    metrics: RecoveryMetrics

    def stem_series(self) -> dict:
        """Two-column (pulse_index, amplitude) arrays for the stem plots.

        The estimated series are relabeled to the winning assignment and
        rescaled by the alignment factor so they overlay the truth.
        """
        est_r, est_c = self.report.h_r_hat, self.report.h_c_hat
        if self.metrics.assignment == "swapped":
            est_r, est_c = est_c, est_r
        beta_r, _ = align_scale(self.channels.h_r, est_r)
        beta_c, _ = align_scale(self.channels.h_c, est_c)
        idx = np.arange(1, self.channels.K + 1, dtype=float)
        return {
            "h_r_true": np.column_stack([idx, self.channels.h_r]),
            "h_r_est": np.column_stack([idx, beta_r * est_r]),
            "h_c_true": np.column_stack([idx, self.channels.h_c]),
            "h_c_est": np.column_stack([idx, beta_c * est_c]),
        }


def recovery_run(seed: int, *, n: int = 4, K: int = 5000, L: int = 4, Q: int = 4,
                 sigma2_z: float = 0.0, sigma2_e: float = 0.0,
                 em_config: Optional[EmConfig] = None, amp_dist="normal") -> RecoveryRun:
    """Draw a scene, simulate it, fit it and score it.

    The scene, the noise draws and the EM initialization use three child
    seeds of ``seed``.  A zero observation variance is replaced by
    ``NOISELESS_SIGMA2_Z`` in the fit only.
    """
    scene_seed, noise_seed, em_seed = derive_seeds(seed, 3)
    model, channels = generate_scene(n, K, L, Q, amp_dist, scene_seed,
                                     sigma2_er=sigma2_e, sigma2_ec=sigma2_e,
                                     sigma2_z=sigma2_z)
    traj = simulate(model, channels, noise_seed)
    base = em_config or EmConfig(sigma2_z=max(sigma2_z, NOISELESS_SIGMA2_Z))
    cfg = replace(base, seed=em_seed)
    report = em_fit(traj.y, n, cfg)
    return RecoveryRun(seed, model, channels, traj, report, score(channels, report))


def run_fig2(seed: int, *, K: int = 5000, n: int = 4, L: int = 4,
             em_config: Optional[EmConfig] = None) -> RecoveryRun:
    """Noiseless recovery (observation variance floored for the fit)."""
    cfg = em_config or EmConfig(sigma2_z=NOISELESS_SIGMA2_Z)
    return recovery_run(seed, n=n, K=K, L=L, Q=L, sigma2_z=0.0, em_config=cfg)


def run_fig3(seed: int, *, K: int = 5000, n: int = 4, L: int = 10,
             sigma2_z: float = 1e-2, em_config: Optional[EmConfig] = None) -> RecoveryRun:
    """Noisy recovery with denser channels."""
    cfg = em_config or EmConfig(sigma2_z=sigma2_z)
    return recovery_run(seed, n=n, K=K, L=L, Q=L, sigma2_z=sigma2_z, em_config=cfg)


DESK_GRID_K = (1000, int(round(10 ** 3.5)), 10000)
DESK_GRID_SIGMA2 = (1e-3, 1e-2, 1e-1)
DESK_TRIALS = 5


def paper_grid():
    """Seven log-spaced values per axis, 50 trials."""
    Ks = tuple(int(round(v)) for v in np.logspace(3, 5, 7))
    s2 = tuple(float(v) for v in np.logspace(-3, -1, 7))
    return Ks, s2, 50


@dataclass
class SweepRow:
    K: int
    sigma2_z: float
    trial: int
    seed: int
    metrics: Optional[RecoveryMetrics]
    iters: int
    wall_ms: float
    error: Optional[str] = None

    def csv_fields(self, timing: bool) -> list:
        m = self.metrics
        nan = float("nan")
        vals = [self.K, repr(float(self.sigma2_z)), self.trial, self.seed]
        if m is None:
            vals += [nan] * 6 + ["failed"]
        else:
            vals += [m.raw_l2_r, m.raw_l2_c, m.aligned_l2_r, m.aligned_l2_c,
                     m.support_hit_r, m.support_hit_c, m.assignment]
        vals += [self.iters, f"{self.wall_ms:.3f}" if timing else ""]
        return [repr(v) if isinstance(v, float) else str(v) for v in vals]


@dataclass
class CellSummary:
    K: int
    sigma2_z: float
    trials: int
    failures: int
    mean_aligned: float
    std_aligned: float
    mean_raw: float
    std_raw: float
    mean_support_hit: float

    @property
    def degraded(self) -> bool:
        return self.failures > DEGRADED_FAILURE_FRACTION * self.trials


def _aligned_error(m: RecoveryMetrics) -> float:
    return 0.5 * (m.aligned_l2_r + m.aligned_l2_c)


def _raw_error(m: RecoveryMetrics) -> float:
    return 0.5 * (m.raw_l2_r + m.raw_l2_c)


def summarize_cell(K, sigma2_z, rows: Sequence[SweepRow]) -> CellSummary:
    ok = [r.metrics for r in rows if r.metrics is not None]
    al = np.array([_aligned_error(m) for m in ok])
    raw = np.array([_raw_error(m) for m in ok])
    hit = np.array([0.5 * (m.support_hit_r + m.support_hit_c) for m in ok])
    nan = float("nan")
    return CellSummary(
        K=K, sigma2_z=sigma2_z, trials=len(rows), failures=len(rows) - len(ok),
        mean_aligned=float(al.mean()) if ok else nan,
        std_aligned=float(al.std()) if ok else nan,
        mean_raw=float(raw.mean()) if ok else nan,
        std_raw=float(raw.std()) if ok else nan,
        mean_support_hit=float(hit.mean()) if ok else nan,
    )


@dataclass
class SweepResult:
    grid_K: tuple
    grid_sigma2: tuple
    trials: int
    master_seed: int
    rows: list = field(default_factory=list)

    def cell_rows(self, K, sigma2_z) -> list:
        return [r for r in self.rows if r.K == K and r.sigma2_z == sigma2_z]

    def summaries(self) -> list:
        return [summarize_cell(K, s, self.cell_rows(K, s))
                for K in self.grid_K for s in self.grid_sigma2]

    def trend(self) -> dict:
        """Spearman rank correlation of per-cell mean aligned error with K
        and with the noise variance."""
        from scipy.stats import spearmanr

        cells = [c for c in self.summaries() if np.isfinite(c.mean_aligned)]
        err = [c.mean_aligned for c in cells]
        rho_K = spearmanr([c.K for c in cells], err).statistic
        rho_s = spearmanr([c.sigma2_z for c in cells], err).statistic
        return {"spearman_K": float(rho_K), "spearman_sigma2_z": float(rho_s)}

    def csv_lines(self, timing: bool = False) -> list[str]:
        lines = [",".join(CSV_COLUMNS)]
        for r in sorted(self.rows, key=lambda r: (r.K, r.sigma2_z, r.trial)):
            lines.append(",".join(r.csv_fields(timing)))
        return lines


def _sweep_trial(K, sigma2_z, trial, seed, n, L, Q, em_config):
    t0 = time.perf_counter()
    try:
        cfg = replace(em_config, sigma2_z=sigma2_z) if em_config else None
        run = recovery_run(seed, n=n, K=K, L=L, Q=Q, sigma2_z=sigma2_z, em_config=cfg)
        return SweepRow(K, sigma2_z, trial, seed, run.metrics, run.report.iters,
                        (time.perf_counter() - t0) * 1e3)
    except DualBlindError as exc:
        log.warning("trial K=%s sigma2_z=%s #%s failed: %s", K, sigma2_z, trial, exc)
        return SweepRow(K, sigma2_z, trial, seed, None, 0,
                        (time.perf_counter() - t0) * 1e3, error=str(exc))


def run_fig4(grid_K=DESK_GRID_K, grid_sigma2=DESK_GRID_SIGMA2, trials: int = DESK_TRIALS,
             seed: int = 0, *, n: int = 4, L: int = 3, Q: int = 3,
             em_config: Optional[EmConfig] = None, workers: int = 1) -> SweepResult:
    """Full-factorial (K, noise variance) sweep with independent trials.

    Every trial gets its own seed derived from ``seed``, the cell and the
    trial index, so results do not depend on execution order or on
    ``workers``.  Failed trials are recorded, not raised.
    """
    grid_K = tuple(int(k) for k in grid_K)
    grid_sigma2 = tuple(float(s) for s in grid_sigma2)
    if not grid_K or not grid_sigma2 or trials < 1:
        raise InvalidConfigError("sweep needs nonempty grids and trials >= 1")
    jobs = []
    for iK, K in enumerate(grid_K):
        for iS, s2 in enumerate(grid_sigma2):
            child = np.random.SeedSequence([seed, iK, iS])
            for t, c in enumerate(child.spawn(trials)):
                tseed = int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
                jobs.append((K, s2, t, tseed, n, L, Q, em_config))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(lambda j: _sweep_trial(*j), jobs))
    else:
        rows = [_sweep_trial(*j) for j in jobs]
    return SweepResult(grid_K, grid_sigma2, trials, seed, rows)
