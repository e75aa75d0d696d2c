"""Command-line entry point: ``dualblind <command> [flags]``.

Commands: simulate, fit, fig2, fig3, fig4, oracle-check.  Settings come from
built-in per-command defaults, then an optional JSON ``--config`` file, then
flags; later sources win.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import io
from .em import EmConfig, em_fit
from .errors import ConfigError, DualBlindError
from .evaluate import (DESK_GRID_K, DESK_GRID_SIGMA2, DESK_TRIALS, NOISELESS_SIGMA2_Z,
                       derive_seeds, paper_grid, recovery_run, run_fig4, score)
from .model import ModelParams, PriorVariances, generate_scene, make_companion, simulate

log = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit", "fig2", "fig3", "fig4", "oracle-check")


@dataclass
class RunConfig:
    command: str
    n: int = 4
    K: int = 5000
    L: int = 4
    Q: int = 4
    # scene generation noise
    sigma2_er: float = 0.0
    sigma2_ec: float = 0.0
    sigma2_z: float = 0.0
    # fixed process-noise variance assumed by the fit
    fit_sigma2_e: float = 1e-4
    max_iters: int = 100
    rel_tol: float = 1e-9
    init: str = "random"
    input_mode: str = "per-pulse"
    estimate_sigma2_z: bool = False
    seed: int = 0
    input: Optional[str] = None
    out: str = "out"
    plot: bool = False
    paper_scale: bool = False
    trials: Optional[int] = None
    grid_K: Optional[list] = None
    grid_sigma2: Optional[list] = None
    workers: int = 1
    timing: bool = False
    oracle_instances: int = 100

    def em_config(self, sigma2_z: float, seed: int) -> EmConfig:
        return EmConfig(max_iters=self.max_iters, rel_tol=self.rel_tol, init=self.init,
                        input_mode=self.input_mode,
                        estimate_sigma2_z=self.estimate_sigma2_z, seed=seed,
                        sigma2_er=self.fit_sigma2_e, sigma2_ec=self.fit_sigma2_e,
                        sigma2_z=max(sigma2_z, NOISELESS_SIGMA2_Z))

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


COMMAND_DEFAULTS = {
    "fig3": {"L": 10, "Q": 10, "sigma2_z": 1e-2},
    "fig4": {"L": 3, "Q": 3},
}

_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


def _check_type(key, value):
    kind = _FIELD_TYPES[key]
    ok = True
    if value is None:
        ok = kind.startswith("Optional")
    elif "int" in kind:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif "float" in kind:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif "bool" in kind:
        ok = isinstance(value, bool)
    elif "str" in kind:
        ok = isinstance(value, str)
    elif "list" in kind:
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value)
    if not ok:
        raise ConfigError(f"field {key!r} has the wrong type ({type(value).__name__}, "
                          f"expected {kind})", path=key)
    if "float" in kind and value is not None:
        value = float(value)
    return value


def config_from_dict(values: dict) -> RunConfig:
    """Validate a flat settings mapping and fill per-command defaults."""
    values = dict(values)
    if "command" not in values:
        raise ConfigError("missing required field 'command'", path="command")
    command = values["command"]
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}; choose from {COMMANDS}",
                          path="command")
    for key in values:
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}", path=key)
    merged = dict(COMMAND_DEFAULTS.get(command, {}))
    merged.update(values)
    checked = {k: _check_type(k, v) for k, v in merged.items()}
    cfg = RunConfig(**checked)
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    for key in ("n", "K", "max_iters", "workers", "oracle_instances"):
        if getattr(cfg, key) < 1:
            raise ConfigError(f"{key} must be >= 1", path=key)
    for key in ("L", "Q"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0", path=key)
    for key in ("sigma2_er", "sigma2_ec", "sigma2_z", "fit_sigma2_e"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"{key} must be >= 0", path=key)
    if cfg.trials is not None and cfg.trials < 1:
        raise ConfigError("trials must be >= 1", path="trials")
    if cfg.command == "fit" and not cfg.input:
        raise ConfigError("fit needs --input pointing to a scene JSON", path="input")


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dualblind", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=None,
                   help="one of: " + ", ".join(COMMANDS))
    p.add_argument("--config", help="JSON file with settings")
    p.add_argument("--out", help="output directory")
    p.add_argument("--seed", type=int)
    p.add_argument("--plot", action="store_const", const=True, help="also write SVG plots")
    p.add_argument("--paper-scale", dest="paper_scale", action="store_const", const=True,
                   help="fig4: 7x7 grid, 50 trials")
    p.add_argument("--input", "--in", dest="input", help="scene JSON for 'fit'")
    p.add_argument("--n", type=int)
    p.add_argument("--K", type=int)
    p.add_argument("--L", type=int)
    p.add_argument("--Q", type=int)
    p.add_argument("--sigma2-er", dest="sigma2_er", type=float)
    p.add_argument("--sigma2-ec", dest="sigma2_ec", type=float)
    p.add_argument("--sigma2-z", dest="sigma2_z", type=float)
    p.add_argument("--fit-sigma2-e", dest="fit_sigma2_e", type=float)
    p.add_argument("--max-iters", dest="max_iters", type=int)
    p.add_argument("--rel-tol", dest="rel_tol", type=float)
    p.add_argument("--init", choices=("random", "zeros"))
    p.add_argument("--input-mode", dest="input_mode", choices=("per-pulse", "tied"))
    p.add_argument("--estimate-sigma2-z", dest="estimate_sigma2_z", action="store_const",
                   const=True)
    p.add_argument("--trials", type=int)
    p.add_argument("--grid-K", dest="grid_K", type=lambda s: [int(v) for v in s.split(",")])
    p.add_argument("--grid-sigma2", dest="grid_sigma2",
                   type=lambda s: [float(v) for v in s.split(",")])
    p.add_argument("--workers", type=int)
    p.add_argument("--timing", action="store_const", const=True,
                   help="fill the wall_ms CSV column (breaks byte-identical reruns)")
    p.add_argument("--oracle-instances", dest="oracle_instances", type=int)
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def parse_config(argv=None) -> RunConfig:
    """Merge defaults, ``--config`` file and flags into a ``RunConfig``."""
    args = _build_parser().parse_args(argv)
    values = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}",
                              path="config") from exc
        if not isinstance(values, dict):
            raise ConfigError("config file must hold a JSON object", path="config")
    flags = {k: v for k, v in vars(args).items()
             if v is not None and k not in ("config", "verbose")}
    values.update(flags)
    return config_from_dict(values)


def _plot_stems(out_dir: Path, series: dict):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dualblind"
    fig, axes = plt.subplots(2, 1, figsize=(8, 5), sharex=True)
    for ax, s in zip(axes, ("r", "c")):
        true, est = series[f"h_{s}_true"], series[f"h_{s}_est"]
        nz = true[:, 1] != 0
        ax.stem(true[nz, 0], true[nz, 1], linefmt="b-", markerfmt="bo", basefmt=" ",
                label="true")
        ax.plot(est[:, 0], est[:, 1], "r-", lw=0.8, label="estimate (aligned)")
        ax.set_ylabel("radar" if s == "r" else "comms")
        ax.legend(loc="upper right")
    axes[-1].set_xlabel("pulse index")
    fig.tight_layout()
    fig.savefig(out_dir / "stems.svg", metadata={"Date": None})
    plt.close(fig)


def _plot_sweep(out_dir: Path, sweep):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "dualblind"
    fig, ax = plt.subplots(figsize=(6, 4))
    summaries = sweep.summaries()
    for s2 in sweep.grid_sigma2:
        cells = [c for c in summaries if c.sigma2_z == s2]
        ax.loglog([c.K for c in cells], [c.mean_aligned for c in cells], "o-",
                  label=f"sigma2_z={s2:g}")
    ax.set_xlabel("K")
    ax.set_ylabel("mean aligned l2 error")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_dir / "fig4.svg", metadata={"Date": None})
    plt.close(fig)


def _cmd_simulate(cfg: RunConfig, out: Path) -> dict:
    scene_seed, noise_seed = derive_seeds(cfg.seed, 2)
    model, channels = generate_scene(cfg.n, cfg.K, cfg.L, cfg.Q, "normal", scene_seed,
                                     sigma2_er=cfg.sigma2_er, sigma2_ec=cfg.sigma2_ec,
                                     sigma2_z=cfg.sigma2_z)
    traj = simulate(model, channels, noise_seed)
    io.save_scene(out / "scene.json", model, channels, traj.y, cfg.seed)
    return {"master": cfg.seed, "scene": scene_seed, "noise": noise_seed}


def _cmd_fit(cfg: RunConfig, out: Path) -> dict:
    model, channels, y, scene_seed = io.load_scene(cfg.input)
    (em_seed,) = derive_seeds(cfg.seed, 1)
    em_cfg = dataclasses.replace(cfg.em_config(model.sigma2_z, em_seed),
                                 c_out=tuple(model.c_out.tolist()))
    report = em_fit(y, model.n, em_cfg)
    io.save_report(out / "report.json", report)
    if channels.L or channels.Q:
        io.write_text(out / "metrics.json", io.dumps(score(channels, report).as_dict()))
    return {"master": cfg.seed, "em": em_seed, "scene": scene_seed}


def _cmd_figure(cfg: RunConfig, out: Path) -> dict:
    # recovery_run derives the EM seed itself
    em_cfg = cfg.em_config(cfg.sigma2_z, 0)
    run = recovery_run(cfg.seed, n=cfg.n, K=cfg.K, L=cfg.L, Q=cfg.Q,
                       sigma2_z=cfg.sigma2_z, sigma2_e=cfg.sigma2_er,
                       em_config=em_cfg)
    io.save_scene(out / "scene.json", run.model, run.channels, run.trajectory.y, cfg.seed)
    io.save_report(out / "report.json", run.report)
    io.write_text(out / "metrics.json", io.dumps(run.metrics.as_dict()))
    series = run.stem_series()
    io.write_stems(out, "stem_", series)
    if cfg.plot:
        _plot_stems(out, series)
    print(json.dumps(run.metrics.as_dict()))
    return {"master": cfg.seed}


def _cmd_fig4(cfg: RunConfig, out: Path) -> dict:
    if cfg.paper_scale:
        grid_K, grid_s2, trials = paper_grid()
    else:
        grid_K, grid_s2, trials = DESK_GRID_K, DESK_GRID_SIGMA2, DESK_TRIALS
    grid_K = cfg.grid_K or grid_K
    grid_s2 = cfg.grid_sigma2 or grid_s2
    trials = cfg.trials or trials
    em_cfg = cfg.em_config(NOISELESS_SIGMA2_Z, 0)
    sweep = run_fig4(grid_K, grid_s2, trials, cfg.seed, n=cfg.n, L=cfg.L, Q=cfg.Q,
                     em_config=em_cfg, workers=cfg.workers)
    io.write_csv(out / "sweep.csv", sweep.csv_lines(timing=cfg.timing))
    summary = ["K,sigma2_z,trials,failures,degraded,mean_aligned,std_aligned,"
               "mean_raw,std_raw,mean_support_hit"]
    for c in sweep.summaries():
        summary.append(",".join(str(v) if not isinstance(v, float) else repr(v) for v in (
            c.K, c.sigma2_z, c.trials, c.failures, c.degraded, c.mean_aligned,
            c.std_aligned, c.mean_raw, c.std_raw, c.mean_support_hit)))
    io.write_csv(out / "summary.csv", summary)
    trend = sweep.trend()
    io.write_text(out / "trend.json", io.dumps(trend))
    if cfg.plot:
        _plot_sweep(out, sweep)
    print(json.dumps(trend))
    return {"master": cfg.seed}


def oracle_check(instances: int = 100, seed: int = 0) -> float:
    """Largest elementwise smoother-vs-dense-oracle deviation over random
    small instances (K in 2..10, n in 1..3, positive variances)."""
    from .smoother import dense_oracle, smooth

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        n = int(rng.integers(1, 4))
        K = int(rng.integers(2, 11))
        model = ModelParams(make_companion(rng.uniform(-1, 1, n)),
                            make_companion(rng.uniform(-1, 1, n)),
                            rng.standard_normal((K, n)), rng.standard_normal((K, n)),
                            rng.uniform(0.01, 1.0), rng.uniform(0.01, 1.0),
                            rng.uniform(0.01, 1.0), rng.standard_normal(2 * n))
        priors = PriorVariances(rng.uniform(0.01, 2.0, K), rng.uniform(0.01, 2.0, K))
        y = rng.standard_normal(K)
        worst = max(worst, smooth(model, priors, y).max_abs_diff(
            dense_oracle(model, priors, y)))
    return worst


ORACLE_TOL = 1e-8


def _cmd_oracle(cfg: RunConfig, out: Path) -> dict:
    worst = oracle_check(cfg.oracle_instances, cfg.seed)
    passed = worst < ORACLE_TOL
    io.write_text(out / "oracle.json", io.dumps(
        {"instances": cfg.oracle_instances, "max_deviation": worst,
         "tolerance": ORACLE_TOL, "passed": passed}))
    print(f"max deviation {worst:.3e} over {cfg.oracle_instances} instances")
    if not passed:
        raise _CheckFailed(f"max deviation {worst:.3e} >= {ORACLE_TOL:g}")
    return {"master": cfg.seed}


class _CheckFailed(Exception):
    pass


_DISPATCH = {
    "simulate": _cmd_simulate,
    "fit": _cmd_fit,
    "fig2": _cmd_figure,
    "fig3": _cmd_figure,
    "fig4": _cmd_fig4,
    "oracle-check": _cmd_oracle,
}


def run(cfg: RunConfig) -> int:
    """Execute one command; returns the process exit status.

    Every run writes ``manifest.json`` into the output directory, also on
    failure.  Errors go to stderr as a JSON object.
    """
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        seeds = _DISPATCH[cfg.command](cfg, out)
    except (DualBlindError, _CheckFailed, OSError) as exc:
        err = {"error": type(exc).__name__, "message": str(exc)}
        for attr in ("pulse", "iteration", "path"):
            if getattr(exc, attr, None) is not None:
                err[attr] = getattr(exc, attr)
        print(json.dumps(err), file=sys.stderr)
        io.write_manifest(out, cfg.as_dict(), {"master": cfg.seed},
                          time.perf_counter() - t0, "error", err)
        return 1
    io.write_manifest(out, cfg.as_dict(), seeds, time.perf_counter() - t0, "ok")
    return 0


def main(argv=None) -> int:
    verbose = "-v" in (argv or sys.argv[1:]) or "--verbose" in (argv or sys.argv[1:])
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = parse_config(argv)
    except ConfigError as exc:
        print(json.dumps({"error": "ConfigError", "message": str(exc), "path": exc.path}),
              file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
