"""Prediction metrics: displacement errors, sigma-level calibration, Best-of-N."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import chi2_cdf_2dof, chi2_quantile_2dof, mahalanobis_sq_batch, sample_batch

# confidence levels k/100, with 1.00 replaced so the threshold stays finite
ESV_LEVELS = np.append(np.arange(1, 100) / 100.0, 0.9999)


def _aligned(params, truth):
    params = np.asarray(params, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if params.ndim != 3 or params.shape[0] == 0:
        raise ValueError("empty prediction batch")
    if params.shape[:-1] != truth.shape[:-1]:
        raise ValueError(f"predictions {params.shape} and truth {truth.shape} are not aligned")
    return params, truth


def ade_fde(params, truth) -> tuple[float, float]:
    params, truth = _aligned(params, truth)
    err = np.linalg.norm(params[..., :2] - truth, axis=-1)
    return float(err.mean()), float(err[:, -1].mean())


@dataclass
class EsvReport:
    delta_esv_1: float
    delta_esv_2: float
    delta_esv_3: float
    mean_abs_delta_esv: float
    levels: list = field(default_factory=list)  # (level, empirical, ideal)

    def to_dict(self, with_levels: bool = False) -> dict:
        d = {
            "delta_esv_1": self.delta_esv_1,
            "delta_esv_2": self.delta_esv_2,
            "delta_esv_3": self.delta_esv_3,
            "mean_abs_delta_esv": self.mean_abs_delta_esv,
        }
        if with_levels:
            d["levels"] = [{"level": a, "empirical": b, "ideal": c} for a, b, c in self.levels]
        return d


def esv_from_d2(d2: np.ndarray) -> EsvReport:
    d2 = np.asarray(d2, dtype=float).ravel()
    if d2.size == 0:
        raise ValueError("empty prediction batch")
    sigma = []
    for i in (1, 2, 3):
        sigma.append(float(np.mean(d2 <= i * i) - chi2_cdf_2dof(i * i)))
    thresholds = chi2_quantile_2dof(ESV_LEVELS)
    emp = np.mean(d2[:, None] <= thresholds[None, :], axis=0)
    table = [(float(p), float(e), float(p)) for p, e in zip(ESV_LEVELS, emp)]
    return EsvReport(*sigma, float(np.mean(np.abs(emp - ESV_LEVELS))), table)


def esv_report(params, truth) -> EsvReport:
    """Sigma-level coverage gaps; negative means over-confident."""
    params, truth = _aligned(params, truth)
    return esv_from_d2(mahalanobis_sq_batch(truth, params))


def bon_ade_fde(params, truth, n: int, rng: np.random.Generator) -> tuple[float, float]:
    """Best-of-``n`` ADE/FDE from trajectories sampled step-by-step from the Gaussians.

    Minimum ADE and minimum FDE are taken independently per window.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    params, truth = _aligned(params, truth)
    draws = sample_batch(params, rng, n)  # (n, W, 12, 2)
    err = np.linalg.norm(draws - truth[None], axis=-1)
    return float(err.mean(axis=2).min(axis=0).mean()), float(err[:, :, -1].min(axis=0).mean())


# column order of the prediction results table
METRIC_COLUMNS = [
    "ade",
    "fde",
    "delta_esv_1",
    "delta_esv_2",
    "delta_esv_3",
    "mean_abs_delta_esv",
    "bon_n",
    "bon_ade",
    "bon_fde",
    "n_windows",
]


def metric_report(params, truth, bon_n: int = 0, rng: np.random.Generator | None = None) -> dict:
    ade, fde = ade_fde(params, truth)
    row = {"ade": ade, "fde": fde}
    row.update(esv_report(params, truth).to_dict())
    row["bon_n"] = bon_n
    if bon_n:
        row["bon_ade"], row["bon_fde"] = bon_ade_fde(params, truth, bon_n, rng or np.random.default_rng(0))
    else:
        row["bon_ade"] = row["bon_fde"] = None
    row["n_windows"] = int(np.asarray(params).shape[0])
    return row
