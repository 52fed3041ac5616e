import csv
import json

import numpy as np
import pytest

from calikit import experiment as E
from calikit.cli import main
from calikit.config import ConfigError, resolve


def _cfg(tmp_path, **over):
    cfg = {
        "dataset": {"kind": "synthetic", "synthetic": {"name": "heteroscedastic", "n": 600, "seed": 0}},
        "task_family": "regression",
        "calibration_task": {"name": "quantile"},
        "model": {"hidden_sizes": [8, 8]},
        "objective": {"lambda": 0.0},
        "optimizer": {"max_epochs": 5, "lr": 3e-3},
        "seed": 0,
    }
    for k, v in over.items():
        if isinstance(v, dict):
            cfg.setdefault(k, {}).update(v)
        else:
            cfg[k] = v
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def test_config_errors_are_enumerated(tmp_path, capsys):
    bad = {"objective": {"lambda": -1, "batch_size": 1}, "optimizer": {"patience": 0}}
    with pytest.raises(ConfigError) as info:
        resolve(bad)
    msgs = info.value.problems
    assert len(msgs) == 3
    assert any("objective.lambda" in m for m in msgs) and any("optimizer.patience" in m for m in msgs)
    p = tmp_path / "bad.json"
    p.write_text(json.dumps(bad))
    assert main(["train", "--config", str(p)]) == 2
    assert "objective.batch_size" in capsys.readouterr().err


def test_bad_json_names_the_file(tmp_path, capsys):
    p = tmp_path / "broken.json"
    p.write_text("{nope")
    assert main(["train", "--config", str(p)]) == 2
    assert "broken.json" in capsys.readouterr().err


def test_unknown_subcommand_is_usage_error():
    assert main(["frobnicate"]) == 2


def test_train_smoke_is_deterministic(tmp_path):
    cfg = _cfg(tmp_path)
    assert main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "a")]) == 0
    assert main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "b")]) == 0
    a, b = tmp_path / "a", tmp_path / "b"
    assert (a / "model.ckpt").read_bytes() == (b / "model.ckpt").read_bytes()
    with open(a / "train_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 5
    losses = [float(r["train_loss"]) for r in rows]
    assert losses[-1] < losses[0]
    m = json.loads((a / "manifest.json").read_text())
    assert m["config"]["objective"]["batch_size"] == 64 and m["config"]["optimizer"]["patience"] == 50
    assert m["prng"]["id"].startswith("numpy.Philox")


def test_constant_validation_loss_stops_after_two_epochs(tmp_path, monkeypatch):
    monkeypatch.setattr(E, "_objective", lambda *a, **k: 1.0)
    cfg = json.loads(_cfg(tmp_path, optimizer={"patience": 1, "max_epochs": 10}).read_text())
    res = E.train(cfg, tmp_path / "run")
    assert len(res.history) == 2 and res.best_epoch == 1


def test_seed_override_changes_run(tmp_path):
    cfg = _cfg(tmp_path)
    main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "a")])
    main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "b"), "--seed", "3"])
    assert (tmp_path / "a" / "model.ckpt").read_bytes() != (tmp_path / "b" / "model.ckpt").read_bytes()
    assert json.loads((tmp_path / "b" / "manifest.json").read_text())["prng"]["seed"] == 3


@pytest.fixture
def run_dir(tmp_path):
    cfg = _cfg(tmp_path, objective={"lambda": 1.0}, optimizer={"max_epochs": 3},
               calibration_task={"name": "quantile"}, metrics={"lce_features": ["x1", "x2"]})
    out = tmp_path / "run"
    assert main(["train", "--config", str(cfg), "--run-dir", str(out)]) == 0
    return out


def test_eval_json_is_reproducible_and_family_specific(run_dir):
    assert main(["eval", "--run-dir", str(run_dir), "--split", "test", "--out", str(run_dir / "m1.json")]) == 0
    assert main(["eval", "--run-dir", str(run_dir), "--split", "test", "--out", str(run_dir / "m2.json")]) == 0
    a = (run_dir / "m1.json").read_text()
    assert a == (run_dir / "m2.json").read_text()
    rep = json.loads(a)
    assert "ece" not in rep and "accuracy" not in rep
    for key in ("qce", "dce", "kce", "nll", "lce_total_mean"):
        assert key in rep


def test_recal_replaces_and_checks_family(run_dir):
    assert main(["recal", "--run-dir", str(run_dir), "--method", "isotonic"]) == 0
    first = json.loads((run_dir / "manifest.json").read_text())["posthoc"]
    assert main(["recal", "--run-dir", str(run_dir), "--method", "isotonic"]) == 0
    second = json.loads((run_dir / "manifest.json").read_text())["posthoc"]
    assert first == second and second["method"] == "isotonic"
    run = E.load_run(run_dir)
    x, y, _ = run.prep.arrays("val")
    from calikit import metrics as M
    assert M.qce(run.predict(x), y) < max(0.02, 2 / np.sqrt(len(y)))
    assert main(["recal", "--run-dir", str(run_dir), "--method", "temperature"]) == 3
    assert main(["eval", "--run-dir", str(run_dir)]) == 0
    assert json.loads((run_dir / "metrics_test.json").read_text())["meta"]["posthoc"] == "isotonic"


def test_lce_map_rows(run_dir, tmp_path):
    out = tmp_path / "grid.csv"
    assert main(["lce-map", "--run-dir", str(run_dir), "--features", "x1,x2", "--grid", "2", "--out", str(out)]) == 0
    with open(out) as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 4
    assert list(rows[0]) == ["f1", "f2", "lce_total", "neighborhood_weight_sum"]
    f1 = [float(r["f1"]) for r in rows]
    assert f1[0] == f1[1] < f1[2] == f1[3]
    assert main(["lce-map", "--run-dir", str(run_dir), "--features", "x1,nope", "--grid", "2",
                 "--out", str(out)]) == 3


def test_manifest_reruns_to_the_same_checkpoint(run_dir, tmp_path):
    cfg = json.loads((run_dir / "manifest.json").read_text())["config"]
    E.train(cfg, tmp_path / "again")
    assert (tmp_path / "again" / "model.ckpt").read_bytes() == (run_dir / "model.ckpt").read_bytes()


def test_repeats_write_aggregate(tmp_path):
    cfg = _cfg(tmp_path, optimizer={"max_epochs": 2})
    assert main(["train", "--config", str(cfg), "--run-dir", str(tmp_path / "rep"), "--repeats", "2"]) == 0
    agg = json.loads((tmp_path / "rep" / "aggregate.json").read_text())
    assert agg["seeds"] == [0, 1] and agg["metrics"]["qce"]["n"] == 2
    assert (tmp_path / "rep" / "seed_1" / "model.ckpt").exists()


def test_injected_truth_scores_well():
    from calikit import data as D
    ds = D.synth_heteroscedastic(10_000, 5)
    std = D.Standardizer.fit(ds)
    cfg = resolve({"metrics": {"dce_threshold": float(np.median(ds.labels)), "kce_samples": 1}})
    rep = E.evaluate_forecast("regression", std.forecast(ds.truth(ds.features)), std.x(ds.features),
                              std.y(ds.labels), cfg, std)
    assert rep["qce"] < 0.01 and rep["dce"] < 0.01


def test_non_finite_loss_reports_epoch(tmp_path, monkeypatch):
    monkeypatch.setattr(E, "_loss_and_grads", lambda *a, **k: (float("nan"), None))
    assert main(["train", "--config", str(_cfg(tmp_path)), "--run-dir", str(tmp_path / "r")]) == 3
    with pytest.raises(E.NumericalError, match="epoch 1"):
        E.train(json.loads(_cfg(tmp_path).read_text()), tmp_path / "r2")
