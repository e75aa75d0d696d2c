"""JSON/CSV/text persistence for scenes, fit reports and sweep results."""

from __future__ import annotations

import json
import platform
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .model import ChannelPair, ModelParams, make_companion

SCENE_KEYS = ("n", "K", "A_r_coeffs", "A_c_coeffs", "F_r", "F_c", "sigma2_er",
              "sigma2_ec", "sigma2_z", "h_r", "h_c", "y", "seed")


def _floats(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def dumps(obj) -> str:
    # json emits floats via repr, the shortest string that round-trips
    return json.dumps(obj, indent=1, sort_keys=False, allow_nan=True) + "\n"


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    return path


def scene_to_dict(model: ModelParams, channels: ChannelPair, y, seed) -> dict:
    d = {
        "n": model.n,
        "K": model.K,
        "A_r_coeffs": _floats(model.A_r[-1]),
        "A_c_coeffs": _floats(model.A_c[-1]),
        "F_r": _floats(model.F_r),
        "F_c": _floats(model.F_c),
        "sigma2_er": model.sigma2_er,
        "sigma2_ec": model.sigma2_ec,
        "sigma2_z": model.sigma2_z,
        "h_r": _floats(channels.h_r),
        "h_c": _floats(channels.h_c),
        "y": _floats(y),
        "seed": seed,
    }
    if not np.all(model.c_out == 1.0):
        d["c_out"] = _floats(model.c_out)
    return d


def scene_from_dict(d: dict):
    """Inverse of ``scene_to_dict``: ``(model, channels, y, seed)``."""
    missing = [k for k in SCENE_KEYS if k not in d]
    if missing:
        raise ConfigError(f"scene is missing fields {missing}", path=missing[0])
    unknown = sorted(set(d) - set(SCENE_KEYS) - {"c_out"})
    if unknown:
        raise ConfigError(f"unknown scene field {unknown[0]!r}", path=unknown[0])
    n, K = int(d["n"]), int(d["K"])
    F_r = np.asarray(d["F_r"], dtype=float).reshape(K, n)
    F_c = np.asarray(d["F_c"], dtype=float).reshape(K, n)
    model = ModelParams(make_companion(d["A_r_coeffs"]), make_companion(d["A_c_coeffs"]),
                        F_r, F_c, d["sigma2_er"], d["sigma2_ec"], d["sigma2_z"],
                        d.get("c_out"))
    channels = ChannelPair(np.asarray(d["h_r"], dtype=float), np.asarray(d["h_c"], dtype=float))
    y = np.asarray(d["y"], dtype=float)
    if y.size != K:
        raise ConfigError(f"y has {y.size} samples, expected K={K}", path="y")
    return model, channels, y, d["seed"]


def save_scene(path, model, channels, y, seed) -> Path:
    return write_text(path, dumps(scene_to_dict(model, channels, y, seed)))


def load_scene(path):
    with open(path, encoding="utf-8") as fh:
        return scene_from_dict(json.load(fh))


def save_report(path, report) -> Path:
    return write_text(path, dumps(report.to_dict()))


def load_report(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def stem_text(series: np.ndarray) -> str:
    """Two whitespace-separated columns: pulse index, amplitude."""
    return "".join(f"{int(k)} {float(v)!r}\n" for k, v in series)


def write_stems(out_dir, prefix: str, series: dict) -> list:
    paths = []
    for name, arr in series.items():
        paths.append(write_text(Path(out_dir) / f"{prefix}{name}.txt", stem_text(arr)))
    return paths


def write_csv(path, lines) -> Path:
    return write_text(path, "\n".join(lines) + "\n")


def versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {
        "dualblind": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "numba": numba.__version__,
    }


def write_manifest(out_dir, config: dict, seeds: dict, wall_s: float, status: str,
                   error=None) -> Path:
    manifest = {
        "status": status,
        "config": config,
        "seeds": seeds,
        "versions": versions(),
        "wall_time_s": wall_s,
    }
    if error is not None:
        manifest["error"] = error
    return write_text(Path(out_dir) / "manifest.json", dumps(manifest))
