"""Trainable calibration: MMD-regularized probabilistic forecasters, kernel
calibration tasks, and calibration metrics on numpy."""

from . import caltasks, diffcore, kernels, metrics, mmd, recal
from .caltasks import CalibrationTask
from .data import Dataset, load_csv, make_rng, split
from .forecast import Forecaster, GaussianForecast
from .mmd import mmd_usq_classification, mmd_usq_regression, training_loss

__version__ = "0.1.0"
