"""Training objectives for Gaussian trajectory heads, with analytic gradients.

Every loss takes predictions as a ``(..., 5)`` array of ``(mu_x, mu_y, sx, sy,
rho)`` and aligned ground truth ``(..., 2)``, and returns a
:class:`LossValueAndGrad` whose ``grad`` has the shape of the predictions.

The calibration loss compares the distribution of squared Mahalanobis
distances of the ground truth against the chi-squared law with two degrees of
freedom, through a kernel-smoothed histogram over fixed bin centres.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .gaussian import chi2_cdf_2dof, validate_params

HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DegenerateSamplesWarning(UserWarning):
    pass


class BinCapWarning(UserWarning):
    pass


@dataclass
class LossValueAndGrad:
    value: float
    grad: np.ndarray
    components: dict = field(default_factory=dict)


@dataclass(frozen=True)
class KdeConfig:
    bin_step: float = 0.01
    bandwidth: float = 0.005
    temperature: float = 0.005
    max_bins: int = 10_000

    def __post_init__(self):
        if self.bin_step <= 0 or self.bandwidth <= 0 or self.temperature <= 0:
            raise ValueError("bin_step, bandwidth and temperature must be positive")
        if self.max_bins < 2:
            raise ValueError("max_bins must be at least 2")

    @property
    def smoothing(self) -> float:
        """Standard deviation of the per-sample soft assignment, in d^2 units."""
        return math.sqrt(self.bandwidth * self.temperature)


@dataclass
class MdSampleSet:
    """Pooled squared Mahalanobis distances plus the (step, pedestrian) each came from."""

    samples: np.ndarray
    provenance: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float).ravel()
        if self.samples.size and (not np.all(np.isfinite(self.samples)) or np.any(self.samples < 0)):
            raise ValueError("squared Mahalanobis samples must be finite and non-negative")

    @classmethod
    def from_predictions(cls, params: np.ndarray, truth: np.ndarray) -> "MdSampleSet":
        d2, _ = mahalanobis_sq_and_grad(params, truth)
        # provenance is (window, step) for the usual (W, 12) layout
        prov = np.argwhere(np.ones(d2.shape, dtype=bool))
        return cls(d2.ravel(), prov)

    def __len__(self):
        return self.samples.size


def mahalanobis_sq_and_grad(params: np.ndarray, truth: np.ndarray):
    """Squared Mahalanobis distance and its derivative w.r.t. the 5 parameters."""
    params = np.asarray(params, dtype=float)
    truth = np.asarray(truth, dtype=float)
    validate_params(params)
    sx, sy, rho = params[..., 2], params[..., 3], params[..., 4]
    zx = (truth[..., 0] - params[..., 0]) / sx
    zy = (truth[..., 1] - params[..., 1]) / sy
    omr = 1.0 - rho * rho
    d2 = (zx * zx - 2.0 * rho * zx * zy + zy * zy) / omr
    grad = np.empty(params.shape)
    grad[..., 0] = -2.0 * (zx - rho * zy) / (omr * sx)
    grad[..., 1] = -2.0 * (zy - rho * zx) / (omr * sy)
    grad[..., 2] = -2.0 * (zx * zx - rho * zx * zy) / (omr * sx)
    grad[..., 3] = -2.0 * (zy * zy - rho * zx * zy) / (omr * sy)
    grad[..., 4] = (2.0 * rho * d2 - 2.0 * zx * zy) / omr
    return d2, grad


def _log_norm_const_and_grad(params: np.ndarray):
    # log sqrt(2 pi det Sigma), kept exactly in the printed form
    sx, sy, rho = params[..., 2], params[..., 3], params[..., 4]
    omr = 1.0 - rho * rho
    value = HALF_LOG_2PI + np.log(sx) + np.log(sy) + 0.5 * np.log(omr)
    grad = np.zeros(params.shape)
    grad[..., 2] = 1.0 / sx
    grad[..., 3] = 1.0 / sy
    grad[..., 4] = -rho / omr
    return value, grad


def _check_aligned(params, truth):
    params = np.asarray(params, dtype=float)
    truth = np.asarray(truth, dtype=float)
    if params.shape[-1] != 5 or truth.shape[-1] != 2 or params.shape[:-1] != truth.shape[:-1]:
        raise ValueError(f"predictions {params.shape} and truth {truth.shape} are not aligned")
    if params.size == 0:
        raise ValueError("empty prediction batch")
    return params, truth


def nll_loss(params, truth) -> LossValueAndGrad:
    """Gaussian negative log-likelihood summed over every prediction."""
    params, truth = _check_aligned(params, truth)
    d2, d2_grad = mahalanobis_sq_and_grad(params, truth)
    norm, norm_grad = _log_norm_const_and_grad(params)
    value = float(np.sum(norm + 0.5 * d2))
    grad = norm_grad + 0.5 * d2_grad
    return LossValueAndGrad(value, grad, {"nll": value})


def nll_mhd_loss(params, truth, penalty_weight: float = 1.0) -> LossValueAndGrad:
    """NLL plus ``penalty_weight`` times the summed (unsquared) Mahalanobis distance.

    The penalty is summed like the NLL so its weight does not shrink with the
    batch size.
    """
    if penalty_weight < 0:
        raise ValueError("penalty_weight must be non-negative")
    base = nll_loss(params, truth)
    if penalty_weight == 0:
        return base
    d2, d2_grad = mahalanobis_sq_and_grad(params, truth)
    d = np.sqrt(d2)
    safe = np.where(d > 0, d, 1.0)
    # subgradient 0 at d = 0
    d_grad = np.where((d > 0)[..., None], d2_grad / (2.0 * safe[..., None]), 0.0)
    penalty = float(np.sum(d))
    return LossValueAndGrad(
        base.value + penalty_weight * penalty,
        base.grad + penalty_weight * d_grad,
        {"nll": base.value, "mhd": penalty},
    )


@dataclass
class KdeEstimate:
    centers: np.ndarray
    density: np.ndarray  # plain kernel density estimate at the centres
    masses: np.ndarray  # softmax-normalised bin probabilities
    cdf: np.ndarray


def bin_centers(max_sample: float, cfg: KdeConfig) -> np.ndarray:
    k = int(math.floor(max_sample / cfg.bin_step + 1e-9)) + 1
    if k > cfg.max_bins:
        warnings.warn(
            f"bin range [0, {max_sample:.3g}] needs {k} bins; capping at {cfg.max_bins}",
            BinCapWarning,
            stacklevel=3,
        )
        return np.linspace(0.0, max_sample, cfg.max_bins)
    return np.arange(k) * cfg.bin_step


def _windowed(samples: np.ndarray, centers: np.ndarray, width: float):
    """Bin indices within ``width`` of each sample; out-of-range slots masked."""
    step = centers[1] - centers[0] if centers.size > 1 else 1.0
    half = max(2, int(math.ceil(width / step)))
    nearest = np.clip(np.rint(samples / step).astype(int), 0, centers.size - 1)
    idx = nearest[:, None] + np.arange(-half, half + 1)[None, :]
    valid = (idx >= 0) & (idx < centers.size)
    idx = np.clip(idx, 0, centers.size - 1)
    return idx, valid


def _prepare(samples, cfg: KdeConfig):
    d = samples.samples if isinstance(samples, MdSampleSet) else np.asarray(samples, dtype=float).ravel()
    if d.size == 0:
        raise ValueError("empty sample set")
    if d.size < 2:
        raise ValueError("kernel density estimate needs at least 2 samples")
    if not np.all(np.isfinite(d)) or np.any(d < 0):
        raise ValueError("samples must be finite and non-negative")
    top = float(d.max())
    if top <= 0:
        warnings.warn("all squared distances are zero; single-bin estimate", DegenerateSamplesWarning, stacklevel=3)
    return d, bin_centers(top, cfg)


def _soft_assign(d, centers, cfg: KdeConfig):
    """Per-sample softmax over bins of the Gaussian kernel exponent.

    Logits are ``-(c_j - D_i)^2 / (2 b T)``: with ``T = b`` this is the
    Gaussian kernel of bandwidth ``b`` renormalised over the bin grid, and
    raising ``T`` flattens it like a softmax temperature.
    """
    scale = cfg.bandwidth * cfg.temperature
    idx, valid = _windowed(d, centers, 12.0 * cfg.smoothing)
    diff = centers[idx] - d[:, None]
    logits = np.where(valid, -0.5 * diff * diff / scale, -np.inf)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    dlogit = np.where(valid, diff / scale, 0.0)
    return idx, w, dlogit


def kde_density(samples, cfg: KdeConfig = KdeConfig()) -> KdeEstimate:
    d, centers = _prepare(samples, cfg)
    n, k = d.size, centers.size

    # plain Gaussian-kernel density at each centre
    idx, valid = _windowed(d, centers, 10.0 * cfg.bandwidth)
    u = (centers[idx] - d[:, None]) / cfg.bandwidth
    kern = np.where(valid, np.exp(-0.5 * u * u) / math.sqrt(2.0 * math.pi), 0.0)
    density = np.bincount(idx.ravel(), weights=kern.ravel(), minlength=k) / (n * cfg.bandwidth)

    sidx, w, _ = _soft_assign(d, centers, cfg)
    masses = np.bincount(sidx.ravel(), weights=w.ravel(), minlength=k) / n
    masses /= masses.sum()
    return KdeEstimate(centers, density, masses, np.cumsum(masses))


def cdf_gap(est_cdf: np.ndarray, centers: np.ndarray) -> float:
    """Mean absolute gap between an estimated CDF and the chi-squared(2) CDF."""
    return float(np.mean(np.abs(np.asarray(est_cdf) - chi2_cdf_2dof(np.asarray(centers)))))


def cdf_loss(samples, cfg: KdeConfig = KdeConfig()) -> LossValueAndGrad:
    """Calibration loss over pooled squared distances; ``grad`` is w.r.t. the samples.

    Bin centres are held fixed when differentiating.
    """
    d, centers = _prepare(samples, cfg)
    n, k = d.size, centers.size
    idx, w, dlogit = _soft_assign(d, centers, cfg)
    masses = np.bincount(idx.ravel(), weights=w.ravel(), minlength=k) / n
    est = np.cumsum(masses)
    target = chi2_cdf_2dof(centers)
    gap = est - target
    value = float(np.mean(np.abs(gap)))

    # dL/dm_j = sum_{j' >= j} sign(gap_j') / k
    tail = np.cumsum(np.sign(gap)[::-1])[::-1] / k
    g = tail[idx]
    mean_logit = np.sum(w * dlogit, axis=1, keepdims=True)
    grad = np.sum(w * (dlogit - mean_logit) * g, axis=1) / n
    return LossValueAndGrad(value, grad, {"cdf": value, "bins": k})


def combined_loss(params, truth, beta: float = 1.0, cfg: KdeConfig = KdeConfig()) -> LossValueAndGrad:
    """``beta * cdf_loss`` over all pooled distances plus the mean Euclidean error of the means."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    params, truth = _check_aligned(params, truth)
    err = params[..., :2] - truth
    norm = np.sqrt(np.sum(err * err, axis=-1))
    count = norm.size
    mean_err = float(norm.sum() / count)
    safe = np.where(norm > 0, norm, 1.0)
    grad = np.zeros(params.shape)
    grad[..., :2] = np.where((norm > 0)[..., None], err / safe[..., None], 0.0) / count

    d2, d2_grad = mahalanobis_sq_and_grad(params, truth)
    cdf = cdf_loss(d2.ravel(), cfg)
    if beta > 0:
        grad += beta * cdf.grad.reshape(d2.shape)[..., None] * d2_grad
    return LossValueAndGrad(
        beta * cdf.value + mean_err,
        grad,
        {"cdf": cdf.value, "mean_error": mean_err},
    )
