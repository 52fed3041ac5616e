"""Experiment configuration: defaults, validation and materialization.

A config is a single JSON document. :func:`resolve` merges it over
:data:`DEFAULTS` and validates every key, reporting all problems at once.
"""

from __future__ import annotations

import copy
import json
from pathlib import Path

from . import kernels as K
from .caltasks import CLASSIFICATION_TASKS, REGRESSION_TASKS

DEFAULTS: dict = {
    "dataset": {
        "kind": "synthetic",
        "path": None,
        "target": None,
        "group_column": None,
        "synthetic": {"name": "heteroscedastic", "n": 2000, "m": 3, "seed": 0},
    },
    "task_family": "regression",
    "calibration_task": {"name": "quantile", "y0": None, "alpha": 0.5, "c": None, "features": []},
    "kernel": None,
    "model": {"hidden_sizes": [128, 128, 128], "sigma_min": 1e-3},
    # lambda multiplies the MMD^2 estimate against the *summed* batch NLL.
    "objective": {"lambda": 0.0, "batch_size": 64, "samples_per_forecast": 10},
    "optimizer": {"name": "adam", "lr": 1e-3, "beta1": 0.9, "beta2": 0.999, "eps": 1e-8,
                  "max_epochs": 100, "patience": 50},
    "metrics": {"qce_levels": 20, "ece_bins": 10, "lce_levels": 20, "lce_bandwidth": 0.3,
                "lce_features": None, "dce_threshold": None, "kce_samples": 10,
                "nll_units": "standardized"},
    "seed": 0,
    "output_dir": "runs/default",
}


class ConfigError(ValueError):
    """Invalid configuration; ``problems`` lists every offending key."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid config:\n  " + "\n  ".join(self.problems))


def _merge(base: dict, over: dict, path: str, problems: list) -> dict:
    out = copy.deepcopy(base)
    for key, val in over.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            problems.append(f"{where}: unknown key")
            continue
        if isinstance(base[key], dict) and isinstance(val, dict):
            out[key] = _merge(base[key], val, where, problems)
        else:
            out[key] = val
    return out


def _num(cfg, path, problems, *, lo=None, hi=None, integer=False, strict_lo=False):
    node = cfg
    for part in path.split("."):
        node = node[part]
    ok = isinstance(node, (int, float)) and not isinstance(node, bool)
    if integer:
        ok = ok and float(node).is_integer()
    if not ok:
        problems.append(f"{path}: expected {'an integer' if integer else 'a number'}, got {node!r}")
        return
    if lo is not None and (node <= lo if strict_lo else node < lo):
        problems.append(f"{path}: must be {'>' if strict_lo else '>='} {lo}, got {node}")
    if hi is not None and node > hi:
        problems.append(f"{path}: must be <= {hi}, got {node}")


def resolve(user: dict) -> dict:
    """Merge ``user`` over the defaults and validate. Raises :class:`ConfigError`."""
    problems: list = []
    if not isinstance(user, dict):
        raise ConfigError(["<root>: config must be a JSON object"])
    cfg = _merge(DEFAULTS, user, "", problems)

    ds = cfg["dataset"]
    if ds["kind"] not in ("csv", "synthetic"):
        problems.append(f"dataset.kind: expected 'csv' or 'synthetic', got {ds['kind']!r}")
    elif ds["kind"] == "csv":
        if not ds["path"]:
            problems.append("dataset.path: required for csv datasets")
        if not ds["target"]:
            problems.append("dataset.target: required for csv datasets")
    else:
        syn = ds["synthetic"]
        if syn["name"] not in ("heteroscedastic", "classification", "geo"):
            problems.append(f"dataset.synthetic.name: unknown generator {syn['name']!r}")
        _num(cfg, "dataset.synthetic.n", problems, lo=100, integer=True)
        _num(cfg, "dataset.synthetic.m", problems, lo=2, hi=10, integer=True)
        _num(cfg, "dataset.synthetic.seed", problems, lo=0, integer=True)
        want = "classification" if syn["name"] == "classification" else "regression"
        if cfg["task_family"] in ("regression", "classification") and cfg["task_family"] != want:
            problems.append(f"task_family: synthetic generator {syn['name']!r} is {want}")

    fam = cfg["task_family"]
    if fam not in ("regression", "classification"):
        problems.append(f"task_family: expected 'regression' or 'classification', got {fam!r}")
    task = cfg["calibration_task"]
    allowed = REGRESSION_TASKS if fam == "regression" else CLASSIFICATION_TASKS
    if task["name"] not in allowed:
        problems.append(f"calibration_task.name: {task['name']!r} is not a {fam} task {allowed}")
    if not 0 < float(task["alpha"]) < 1:
        problems.append("calibration_task.alpha: must lie in (0, 1)")
    if task["name"] == "local" and not task["features"]:
        problems.append("calibration_task.features: local calibration needs feature names")
    if task["name"] == "group" and ds["kind"] == "csv" and not ds["group_column"]:
        problems.append("dataset.group_column: required by the group calibration task")

    if cfg["kernel"] is not None:
        try:
            K.from_dict(cfg["kernel"])
        except (KeyError, ValueError, TypeError) as exc:
            problems.append(f"kernel: {exc}")

    hs = cfg["model"]["hidden_sizes"]
    if not (isinstance(hs, list) and len(hs) >= 1 and all(isinstance(h, int) and h > 0 for h in hs)):
        problems.append(f"model.hidden_sizes: expected a list of positive integers, got {hs!r}")
    _num(cfg, "model.sigma_min", problems, lo=0, strict_lo=True)
    _num(cfg, "objective.lambda", problems, lo=0)
    _num(cfg, "objective.batch_size", problems, lo=2, integer=True)
    _num(cfg, "objective.samples_per_forecast", problems, lo=1, hi=200, integer=True)
    if cfg["optimizer"]["name"] != "adam":
        problems.append("optimizer.name: only 'adam' is supported")
    _num(cfg, "optimizer.lr", problems, lo=0, strict_lo=True)
    _num(cfg, "optimizer.max_epochs", problems, lo=1, integer=True)
    _num(cfg, "optimizer.patience", problems, lo=1, integer=True)
    _num(cfg, "metrics.qce_levels", problems, lo=2, integer=True)
    _num(cfg, "metrics.ece_bins", problems, lo=1, integer=True)
    _num(cfg, "metrics.lce_levels", problems, lo=1, integer=True)
    _num(cfg, "metrics.lce_bandwidth", problems, lo=0, strict_lo=True)
    _num(cfg, "seed", problems, lo=0, integer=True)
    if problems:
        raise ConfigError(problems)
    return cfg


def load(path) -> dict:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError([f"{path}: cannot read config ({exc.strerror})"]) from None
    try:
        user = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: invalid JSON ({exc})"]) from None
    return resolve(user)
