"""Run configuration: defaults, deep merge, validation, resolved dumps."""
from __future__ import annotations

import copy
import json
from pathlib import Path

from .pdesim import SCENARIO_KINDS

DEFAULTS = {
    "seed": 0,
    "scenario": {
        "kinds": list(SCENARIO_KINDS),
        "H": 64,
        "W": 64,
        "n_frames": 24,
        "count": 10,
        "eval_count": 5,
        "channels": 1,
        "velocity": None,
        "radar": True,
        "dtype": "float64",
    },
    "model": {
        "tno": {"s": 8, "widths": [32, 64, 32], "depth": 1, "use_dem": True},
        "vno": {"s": 8, "widths": [32, 64, 32], "depth": 1, "v_max": 0.5},
        "translator": {"width": 16},
    },
    "train": {
        "alpha": 1.0,
        "lr": 1e-3,
        "steps": 200,
        "batch": 4,
        "seam_pair": False,
        "precision": 32,
        "param_lr": None,
    },
    "translate": {"lr": 3e-3, "steps": 300, "batch": 8, "precision": 32},
    "eval": {"thresholds": [4.0, 8.0], "s": 8, "predictor": "model", "pgm": False,
             "stride": None},
    "sweep": {"alphas": [0.0, 0.2, 1.0, 5.0], "tno_steps": 200, "vno_steps": 200},
    "paths": {
        "data": None,
        "checkpoints": {"tno": None, "vno": None, "maps": None, "translator": None},
    },
}


class ConfigError(ValueError):
    """Raised with every validation problem found, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def merge(base, override):
    out = copy.deepcopy(base)
    for key, value in (override or {}).items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def _unknown_keys(defaults, given, prefix=""):
    problems = []
    for key, value in (given or {}).items():
        path = f"{prefix}{key}"
        if key not in defaults:
            problems.append(f"unknown key {path!r}")
        elif isinstance(defaults[key], dict) and isinstance(value, dict):
            problems += _unknown_keys(defaults[key], value, path + ".")
    return problems


def validate(cfg, raw=None):
    problems = _unknown_keys(DEFAULTS, raw or {})
    sc = cfg["scenario"]
    for kind in sc["kinds"]:
        if kind not in SCENARIO_KINDS:
            problems.append(f"scenario.kinds: unknown kind {kind!r}")
    if not sc["kinds"]:
        problems.append("scenario.kinds must not be empty")
    if sc["H"] < 16 or sc["W"] < 16:
        problems.append("scenario.H and scenario.W must be >= 16")
    if sc["H"] % 4 or sc["W"] % 4:
        problems.append("scenario.H and scenario.W must be divisible by 4")
    if sc["n_frames"] < 9:
        problems.append("scenario.n_frames must be >= 9")
    if sc["count"] < 1 or sc["eval_count"] < 0:
        problems.append("scenario.count must be >= 1 and scenario.eval_count >= 0")
    if sc["dtype"] not in ("float32", "float64"):
        problems.append("scenario.dtype must be float32 or float64")
    tr = cfg["train"]
    if tr["alpha"] < 0:
        problems.append("train.alpha must be >= 0")
    if tr["lr"] < 0:
        problems.append("train.lr must be >= 0")
    if tr["precision"] not in (32, 64):
        problems.append("train.precision must be 32 or 64")
    if tr["steps"] < 0 or tr["batch"] < 1:
        problems.append("train.steps must be >= 0 and train.batch >= 1")
    m = cfg["model"]
    if m["tno"]["s"] != m["vno"]["s"]:
        problems.append("model.tno.s and model.vno.s must agree")
    if m["vno"]["v_max"] <= 0 or m["vno"]["v_max"] > 0.5:
        problems.append("model.vno.v_max must lie in (0, 0.5] to stay CFL-stable")
    if cfg["eval"]["predictor"] not in ("model", "persistence", "truth"):
        problems.append("eval.predictor must be model, persistence or truth")
    if any(t <= 0 for t in cfg["eval"]["thresholds"]):
        problems.append("eval.thresholds must be positive")
    alphas = cfg["sweep"]["alphas"]
    if not alphas or any(a < 0 for a in alphas):
        problems.append("sweep.alphas must be a non-empty list of non-negative values")
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path=None, overrides=None):
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError([f"{path}: not valid JSON ({exc})"]) from exc
    raw = merge(raw, overrides or {})
    return validate(merge(DEFAULTS, raw), raw)


def write_resolved(cfg, out_dir, name="config.resolved.json"):
    path = Path(out_dir) / name
    path.write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return path
