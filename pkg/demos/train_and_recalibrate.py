# %% [markdown]
# # Training with a calibration penalty, then recalibrating
#
# Fit the same network on synthetic heteroscedastic data with and without the
# MMD term, compare held-out metrics, and add isotonic recalibration on top.
# Takes about a minute on one core.

# %%
import tempfile
from pathlib import Path

from calikit import experiment as E

base = {
    "dataset": {"kind": "synthetic", "synthetic": {"name": "heteroscedastic", "n": 5000}},
    "calibration_task": {"name": "quantile"},
    "model": {"hidden_sizes": [32, 32]},
    "optimizer": {"max_epochs": 30, "lr": 3e-3},
    "seed": 0,
}
root = Path(tempfile.mkdtemp())

# %%
reports = {}
for lam in (0.0, 10.0):
    cfg = dict(base, objective={"lambda": lam})
    run = root / f"lambda_{lam:g}"
    res = E.train(cfg, run)
    reports[f"lambda={lam:g}"] = E.evaluate_run(run, "test")
    print(f"lambda={lam:g}: stopped after {len(res.history)} epochs, best {res.best_epoch}")

# %% [markdown]
# Isotonic recalibration is fitted on the validation split and stored in the
# run manifest; later evaluations apply it automatically.

# %%
E.recalibrate_run(root / "lambda_10", "isotonic")
reports["lambda=10 + isotonic"] = E.evaluate_run(root / "lambda_10", "test")

for name, rep in reports.items():
    print(f"{name:22s} qce {rep['qce']:.4f}  dce {rep['dce']:.4f}  nll {rep['nll']:.4f}")

# %% [markdown]
# Here the network is already close to calibrated, so a step-function map fitted
# on 500 validation points mostly adds noise. Test points whose PIT lands on a
# flat step also get a tiny density, which shows up as a much larger NLL.
# Isotonic pays off when the forecaster is clearly miscalibrated. For example,
# doubling every predicted sigma raises QCE to about 0.1, and the same map
# brings it back to about 0.02.
