"""Calibrated Gaussian pedestrian prediction and uncertainty-aware MPC navigation."""

from .gaussian import Gaussian2, chi2_cdf_2dof, chi2_quantile_2dof, mahalanobis_sq
from .losses import KdeConfig, cdf_loss, combined_loss, nll_loss, nll_mhd_loss
from .metrics import esv_report, metric_report
from .planner import MpcConfig, RobotState, run_scenario, solve_mpc
from .predictor import CVPredictor, MLPPredictor, TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "CVPredictor",
    "Gaussian2",
    "KdeConfig",
    "MLPPredictor",
    "MpcConfig",
    "RobotState",
    "TrainConfig",
    "cdf_loss",
    "chi2_cdf_2dof",
    "chi2_quantile_2dof",
    "combined_loss",
    "esv_report",
    "mahalanobis_sq",
    "metric_report",
    "nll_loss",
    "nll_mhd_loss",
    "run_scenario",
    "solve_mpc",
    "train",
]
