"""Training, evaluation, recalibration and local-calibration maps over run
directories.

A run directory holds ``model.ckpt`` (parameters), ``manifest.json``
(resolved config, architecture, standardization, kernel, post-hoc map) and
``train_log.csv``. Everything needed to evaluate a run is read back from
the manifest, so a run can be re-evaluated or recalibrated later.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import diffcore as ad
from . import kernels as K
from . import metrics as M
from . import recal as R
from .caltasks import Batch, CalibrationTask, build_pairs, kernel_for, target_rows
from .config import ConfigError, resolve
from .data import PRNG_ID, SYNTHETIC, Dataset, Standardizer, load_csv, make_rng, split
from .forecast import MAGIC, Forecaster, load_params, save_params
from .mmd import training_loss

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


# --- data and task preparation -------------------------------------------------

def load_dataset(cfg: dict) -> Dataset:
    ds = cfg["dataset"]
    if ds["kind"] == "csv":
        return load_csv(ds["path"], ds["target"], cfg["task_family"], ds["group_column"])
    syn = ds["synthetic"]
    gen = SYNTHETIC[syn["name"]]
    if syn["name"] == "classification":
        return gen(int(syn["n"]), int(syn["m"]), int(syn["seed"]))
    return gen(int(syn["n"]), int(syn["seed"]))


@dataclass
class Prepared:
    cfg: dict
    data: Dataset
    splits: dict
    std: Standardizer
    task: CalibrationTask

    def arrays(self, name: str):
        """Standardized ``(x, y, groups)`` of one split."""
        d = self.splits[name]
        x = self.std.x(d.features)
        y = self.std.y(d.labels) if d.family == "regression" else d.labels
        return x, y, d.groups


def prepare(cfg: dict) -> Prepared:
    """Load and split the data, fit standardization and build the task.

    Data-dependent defaults (threshold ``y0``, decision ``c``) are filled in
    ``cfg`` in raw label units so that the manifest records them.
    """
    data = load_dataset(cfg)
    train, val, test = split(data, int(cfg["seed"]))
    std = Standardizer.fit(train)
    ct = cfg["calibration_task"]
    if data.family == "regression":
        median = float(np.median(train.labels))
        if ct["name"] == "threshold" and ct["y0"] is None:
            ct["y0"] = median
        if ct["name"] == "decision" and ct["c"] is None:
            ct["c"] = median
        if cfg["metrics"]["dce_threshold"] is None:
            cfg["metrics"]["dce_threshold"] = median
    if ct["name"] == "group" and data.groups is None:
        raise ConfigError(["calibration_task.name: dataset has no group column"])
    try:
        features = tuple(data.column_index(f) for f in ct["features"])
    except KeyError as exc:
        raise ConfigError([f"calibration_task.features: {exc.args[0]}"]) from None
    task = CalibrationTask(
        ct["name"],
        y0=None if ct["y0"] is None else float(std.y(ct["y0"])),
        alpha=float(ct["alpha"]),
        c=None if ct["c"] is None else float(std.y(ct["c"])),
        features=features,
        kernel=None if cfg["kernel"] is None else K.from_dict(cfg["kernel"]),
    )
    return Prepared(cfg, data, {"train": train, "val": val, "test": test}, std, task)


def _batches(n: int, size: int, order: np.ndarray):
    for start in range(0, n, size):
        idx = order[start:start + size]
        if len(idx) >= 2:
            yield idx


def _batch(x, y, groups, idx) -> Batch:
    return Batch(x[idx], y[idx], None if groups is None else groups[idx])


def resolve_kernel(task: CalibrationTask, forecaster: Forecaster, batch: Batch, S: int, seed: int):
    """Fill unset RBF bandwidths by the median heuristic on the target rows
    of ``batch`` under the initial forecaster."""
    rng = make_rng(seed, "bandwidth")
    channels = build_pairs(task, batch, forecaster.outputs(batch.x), S=S, rng=rng)
    rows = np.vstack([target_rows(ch) for ch in channels])
    return K.resolve_bandwidths(kernel_for(task), rows)


# --- training ------------------------------------------------------------------

@dataclass
class TrainResult:
    run_dir: Path
    forecaster: Forecaster
    history: list
    best_epoch: int
    manifest: dict


def _loss_and_grads(batch, forecaster, task, lam, S, eps):
    tape = ad.Tape()
    nodes = {k: tape.var(v, k) for k, v in forecaster.params.items()}
    parts = training_loss(batch, forecaster, task, lam, S=S, params=nodes, eps=eps)
    value = float(ad.value_of(parts.total))
    if not np.isfinite(value):
        return value, None
    ad.backward(tape, parts.total)
    grads = {k: tape.grads.get(n.id, np.zeros_like(n.value)) for k, n in nodes.items()}
    return value, grads


def _objective(batch, forecaster, task, lam, S, eps) -> float:
    return float(ad.value_of(training_loss(batch, forecaster, task, lam, S=S, eps=eps).total))


def train(cfg: dict, run_dir=None, verbose: bool = False) -> TrainResult:
    """Train a forecaster with ``sum NLL + lambda * MMD^2`` and early stopping.

    ``cfg`` may be a raw user config; it is resolved here. The checkpoint
    keeps the parameters with the best validation objective.
    """
    cfg = resolve(copy.deepcopy(cfg))
    prep = prepare(cfg)
    seed = int(cfg["seed"])
    obj, opt = cfg["objective"], cfg["optimizer"]
    lam, S, bs = float(obj["lambda"]), int(obj["samples_per_forecast"]), int(obj["batch_size"])
    run_dir = Path(run_dir if run_dir is not None else cfg["output_dir"])
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg["output_dir"] = str(run_dir)

    x_tr, y_tr, g_tr = prep.arrays("train")
    x_va, y_va, g_va = prep.arrays("val")
    regression = prep.data.family == "regression"
    forecaster = Forecaster.create("gaussian" if regression else "categorical", x_tr.shape[1],
                                   cfg["model"]["hidden_sizes"], n_classes=prep.data.n_classes,
                                   sigma_min=float(cfg["model"]["sigma_min"]), rng=make_rng(seed, "init"))

    task = prep.task
    first = _batch(x_tr, y_tr, g_tr, np.arange(min(bs, len(y_tr))))
    task = task.with_kernel(resolve_kernel(task, forecaster, first, S, seed))
    cfg["kernel"] = K.to_dict(task.kernel)
    use_task = task if lam > 0 else None

    batch_rng, noise_rng = make_rng(seed, "batch"), make_rng(seed, "noise")
    val_rng = make_rng(seed, "val_noise")
    val_batches = [(_batch(x_va, y_va, g_va, idx), val_rng.standard_normal((len(idx), S)) if regression else None)
                   for idx in _batches(len(y_va), bs, np.arange(len(y_va)))]

    state = ad.AdamState()
    best_val, best_params, best_epoch, wait = np.inf, forecaster.params, 0, 0
    history = []
    t0 = time.perf_counter()
    for epoch in range(1, int(opt["max_epochs"]) + 1):
        order = batch_rng.permutation(len(y_tr))
        total = 0.0
        for idx in _batches(len(y_tr), bs, order):
            eps = noise_rng.standard_normal((len(idx), S)) if regression else None
            value, grads = _loss_and_grads(_batch(x_tr, y_tr, g_tr, idx), forecaster, use_task, lam, S, eps)
            if grads is None:
                raise NumericalError(f"non-finite training loss at epoch {epoch}")
            try:
                params, state = ad.adam_step(forecaster.params, grads, state, lr=float(opt["lr"]),
                                             beta1=float(opt["beta1"]), beta2=float(opt["beta2"]),
                                             eps=float(opt["eps"]))
            except ad.GradientError as exc:
                raise NumericalError(f"{exc} at epoch {epoch}") from None
            forecaster.params = params
            total += value
        val = sum(_objective(b, forecaster, use_task, lam, S, e) for b, e in val_batches) / max(len(y_va), 1)
        if not np.isfinite(val):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        history.append({"epoch": epoch, "train_loss": total / len(y_tr), "val_loss": val,
                        "wall_time": time.perf_counter() - t0})
        if verbose:
            log.info("epoch %d train %.5f val %.5f", epoch, total / len(y_tr), val)
        if val < best_val:
            best_val, best_params, best_epoch, wait = val, forecaster.params, epoch, 0
        else:
            wait += 1
            if wait >= int(opt["patience"]):
                break
    forecaster.params = best_params

    save_params(run_dir / "model.ckpt", forecaster.params)
    manifest = {
        "format": MAGIC,
        "config": cfg,
        "model": {"head": forecaster.kind, "n_features": forecaster.n_features,
                  "hidden_sizes": list(forecaster.hidden_sizes), "n_outputs": forecaster.n_outputs,
                  "sigma_min": forecaster.sigma_min, "activation": "relu"},
        "feature_columns": list(prep.data.columns),
        "classes": prep.data.classes,
        "standardizer": prep.std.to_dict(),
        "kernel": cfg["kernel"],
        "prng": {"id": PRNG_ID, "seed": seed},
        "training": {"epochs_run": len(history), "best_epoch": best_epoch, "best_val_loss": best_val},
        "posthoc": None,
    }
    _write_json(run_dir / "manifest.json", manifest)
    with open(run_dir / "train_log.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["epoch", "train_loss", "val_loss", "wall_time"])
        w.writeheader()
        w.writerows(history)
    return TrainResult(run_dir, forecaster, history, best_epoch, manifest)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# --- loading and evaluating runs ---------------------------------------------------

@dataclass
class Run:
    run_dir: Path
    manifest: dict
    prep: Prepared
    forecaster: Forecaster
    posthoc: object = None

    @property
    def family(self) -> str:
        return self.prep.data.family

    def predict(self, x):
        """Forecast in standardized units, with any post-hoc map applied."""
        out = self.forecaster.predict(x)
        if isinstance(self.posthoc, R.QuantileRecalibrator):
            return R.RecalibratedForecast(out, self.posthoc)
        if isinstance(self.posthoc, R.TemperatureScaler):
            return self.posthoc(self.forecaster.logits(x))
        return out


def load_run(run_dir) -> Run:
    run_dir = Path(run_dir)
    try:
        manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise FileNotFoundError(f"{run_dir}: no manifest.json; is this a run directory?") from None
    if manifest.get("format") != MAGIC:
        raise ValueError(f"{run_dir}: unsupported run format {manifest.get('format')!r}")
    cfg = resolve(manifest["config"])
    prep = prepare(cfg)
    prep.std = Standardizer.from_dict(manifest["standardizer"])
    mdl = manifest["model"]
    kind = mdl["head"]
    forecaster = Forecaster(kind, mdl["n_features"], tuple(mdl["hidden_sizes"]), mdl["n_outputs"],
                            load_params(run_dir / "model.ckpt"), mdl["sigma_min"])
    return Run(run_dir, manifest, prep, forecaster, R.from_dict(manifest.get("posthoc")))


def evaluate_forecast(family: str, forecast, x, y, cfg: dict, std: Standardizer | None = None,
                      seed: int = 0, columns=None) -> M.MetricReport:
    """Metrics for a forecast on standardized features ``x`` and labels ``y``.

    ``forecast`` is a regression forecast object (``cdf``/``logpdf``/
    ``sample``) or a pmf matrix. Regression reports omit accuracy and ECE;
    classification reports omit QCE and DCE.
    """
    mc = cfg["metrics"]
    rng = make_rng(seed, "eval")
    values: dict = {"nll": M.nll_eval(forecast, y)}
    meta = {"family": family, "n": int(len(y)), "nll_units": "standardized labels" if family == "regression" else "nats"}
    if family == "regression":
        values["qce"] = M.qce(forecast, y, int(mc["qce_levels"]))
        c_raw = mc["dce_threshold"]
        if c_raw is not None:
            c = float(std.y(c_raw)) if std is not None else float(c_raw)
            values["dce_squared"] = M.dce_squared(forecast, y, c)
            values["dce"] = float(np.sqrt(values["dce_squared"]))
            meta["dce_threshold"] = {"raw": float(c_raw), "standardized": c}
        values["kce"] = M.kce(x, y, forecast, S=int(mc["kce_samples"]), rng=rng)
        lce_cols = mc["lce_features"]
        if lce_cols is None and cfg["calibration_task"]["name"] == "local":
            lce_cols = cfg["calibration_task"]["features"]
        if lce_cols:
            if columns is None:
                raise ValueError("feature column names are needed to compute LCE")
            phi = x[:, [list(columns).index(c) for c in lce_cols]]
            kern = K.RBF(float(mc["lce_bandwidth"]))
            _, totals = M.lce(forecast, y, phi, phi, kern, int(mc["lce_levels"]))
            values["lce_total_mean"] = float(np.mean(totals))
            meta["lce_features"] = list(lce_cols)
        meta["qce_levels"] = int(mc["qce_levels"])
    else:
        values["accuracy"] = M.accuracy(forecast, y)
        values["ece"] = M.ece(forecast, y, int(mc["ece_bins"]))
        values["entropy"] = M.mean_entropy(forecast)
        values["kce"] = M.kce(x, y, forecast)
        meta["ece_bins"] = int(mc["ece_bins"])
    return M.MetricReport(values, meta)


def evaluate_run(run_dir, split_name: str = "test", out=None) -> M.MetricReport:
    if split_name not in SPLITS:
        raise ValueError(f"unknown split {split_name!r}; expected one of {SPLITS}")
    run = load_run(run_dir)
    x, y, _ = run.prep.arrays(split_name)
    cfg = run.prep.cfg
    report = evaluate_forecast(run.family, run.predict(x), x, y, cfg, run.prep.std, int(cfg["seed"]),
                               columns=run.prep.data.columns)
    report.meta.update(split=split_name, seed=int(cfg["seed"]),
                       calibration_task=cfg["calibration_task"]["name"],
                       kernel=run.manifest["kernel"],
                       posthoc=None if run.posthoc is None else run.posthoc.to_dict()["method"])
    out = Path(out) if out is not None else Path(run_dir) / f"metrics_{split_name}.json"
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    return report


def recalibrate_run(run_dir, method: str):
    """Fit a post-hoc map on the validation split and store it in the
    manifest, replacing any earlier one (maps never stack)."""
    run = load_run(run_dir)
    x, y, _ = run.prep.arrays("val")
    if method == "isotonic":
        if run.family != "regression":
            raise ValueError("isotonic recalibration applies to regression runs")
        fitted = R.fit_isotonic(run.forecaster.predict(x).cdf(y))
    elif method == "temperature":
        if run.family != "classification":
            raise ValueError("temperature scaling applies to classification runs")
        fitted = R.fit_temperature(run.forecaster.logits(x), y)
    else:
        raise ValueError(f"unknown recalibration method {method!r}")
    manifest = dict(run.manifest, posthoc=fitted.to_dict())
    _write_json(Path(run_dir) / "manifest.json", manifest)
    return fitted


def lce_grid(forecast, y, phi, lo, hi, grid: int, kernel: K.KernelSpec, n_levels: int = 20):
    """LCE totals on a ``grid x grid`` lattice spanning ``[lo, hi]`` in the two
    columns of ``phi``; row-major with the first feature varying slowest.

    Returns ``(points, totals, weight_sums)``; totals are NaN where the
    neighbourhood weight is zero.
    """
    g1 = np.linspace(lo[0], hi[0], grid)
    g2 = np.linspace(lo[1], hi[1], grid)
    pts = np.array([[a, b] for a in g1 for b in g2])
    W = np.asarray(K.gram(kernel, pts, phi))
    wsum = W.sum(axis=1)
    totals = np.full(len(pts), np.nan)
    ok = wsum > 0
    if ok.any():
        _, t = M.lce(forecast, y, phi, pts[ok], kernel, n_levels)
        totals[ok] = t
    return pts, totals, wsum


def lce_map_run(run_dir, features, grid: int, out, split_name: str = "test"):
    """Write a CSV of LCE totals over a grid spanning two features."""
    if grid < 2:
        raise ValueError("grid must be at least 2")
    if len(features) != 2:
        raise ValueError("lce-map needs exactly two feature names")
    run = load_run(run_dir)
    if run.family != "regression":
        raise ValueError("lce-map applies to regression runs")
    cols = run.prep.data.columns
    try:
        idx = [cols.index(f) for f in features]
    except ValueError:
        raise KeyError(f"features {features} not all in {cols}") from None
    x, y, _ = run.prep.arrays(split_name)
    phi = x[:, idx]
    mc = run.prep.cfg["metrics"]
    pts, totals, wsum = lce_grid(run.predict(x), y, phi, phi.min(axis=0), phi.max(axis=0), grid,
                                 K.RBF(float(mc["lce_bandwidth"])), int(mc["lce_levels"]))
    raw = pts * run.prep.std.x_std[idx] + run.prep.std.x_mean[idx]
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["f1", "f2", "lce_total", "neighborhood_weight_sum"])
        for (a, b), t, s in zip(raw, totals, wsum):
            w.writerow([repr(float(a)), repr(float(b)), "" if np.isnan(t) else repr(float(t)), repr(float(s))])
    return pts, totals, wsum


def repeat_runs(cfg: dict, repeats: int, run_dir, split_name: str = "test") -> dict:
    """Train and evaluate ``repeats`` seeds; write ``aggregate.json`` with
    per-metric mean and standard error."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    base = resolve(copy.deepcopy(cfg))
    run_dir = Path(run_dir if run_dir is not None else base["output_dir"])
    per_seed = {}
    for r in range(repeats):
        seed = int(base["seed"]) + r
        c = copy.deepcopy(cfg)
        c["seed"] = seed
        sub = run_dir / f"seed_{seed}"
        train(c, sub)
        per_seed[seed] = evaluate_run(sub, split_name).values
    keys = sorted({k for v in per_seed.values() for k in v})
    agg = {}
    for k in keys:
        vals = np.array([v[k] for v in per_seed.values() if k in v], dtype=np.float64)
        se = float(vals.std(ddof=1) / np.sqrt(len(vals))) if len(vals) > 1 else 0.0
        agg[k] = {"mean": float(vals.mean()), "stderr": se, "n": int(len(vals))}
    out = {"split": split_name, "seeds": list(per_seed), "metrics": agg,
           "per_seed": {str(s): v for s, v in per_seed.items()}}
    _write_json(run_dir / "aggregate.json", out)
    return out
