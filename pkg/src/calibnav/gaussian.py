"""Bivariate Gaussian primitives.

A prediction for one pedestrian at one future step is stored as the 5-tuple
``(mu_x, mu_y, sx, sy, rho)``. Batched functions accept arrays whose last axis
holds that tuple, so a ``(W, 12, 5)`` array of window predictions can be used
directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

# det(Sigma) below this (m^4) is treated as numerically singular
MIN_DET = 1e-18


class InvalidCovarianceError(ValueError):
    """Raised when a predicted covariance is not usable.

    ``index`` is the position of the first offending entry in the batch
    (for a ``(W, 12, 5)`` batch that is ``(window, step)``), or ``None`` for a
    single Gaussian.
    """

    def __init__(self, message: str, index: tuple[int, ...] | None = None):
        if index is not None:
            message = f"{message} at index {index}"
        super().__init__(message)
        self.index = index


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


@dataclass(frozen=True)
class Gaussian2:
    """Bivariate normal in (mean, std, std, correlation) form."""

    mu_x: float
    mu_y: float
    sx: float
    sy: float
    rho: float

    def __post_init__(self):
        vals = (self.mu_x, self.mu_y, self.sx, self.sy, self.rho)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidCovarianceError(f"non-finite Gaussian parameters {vals}")
        if self.sx <= 0 or self.sy <= 0 or not -1.0 < self.rho < 1.0:
            raise InvalidCovarianceError(
                f"need sx>0, sy>0, |rho|<1; got sx={self.sx}, sy={self.sy}, rho={self.rho}"
            )

    @classmethod
    def from_cov(cls, mu, sigma) -> "Gaussian2":
        mu = np.asarray(mu, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if not np.allclose(sigma, sigma.T, rtol=1e-12, atol=1e-15):
            raise InvalidCovarianceError("covariance is not symmetric")
        if sigma[0, 0] <= 0 or sigma[1, 1] <= 0:
            raise InvalidCovarianceError("covariance has non-positive variance")
        sx = math.sqrt(sigma[0, 0])
        sy = math.sqrt(sigma[1, 1])
        return cls(float(mu[0]), float(mu[1]), sx, sy, float(sigma[0, 1] / (sx * sy)))

    @classmethod
    def from_array(cls, arr) -> "Gaussian2":
        return cls(*(float(v) for v in arr))

    @property
    def mean(self) -> np.ndarray:
        return np.array([self.mu_x, self.mu_y])

    @property
    def cov(self) -> np.ndarray:
        c = self.rho * self.sx * self.sy
        return np.array([[self.sx**2, c], [c, self.sy**2]])

    @property
    def det(self) -> float:
        return self.sx**2 * self.sy**2 * (1.0 - self.rho**2)

    def as_array(self) -> np.ndarray:
        return np.array([self.mu_x, self.mu_y, self.sx, self.sy, self.rho])

    def transform(self, A, b) -> "Gaussian2":
        """Distribution of ``A x + b`` for ``x`` drawn from this Gaussian."""
        A = np.asarray(A, dtype=float)
        return Gaussian2.from_cov(A @ self.mean + np.asarray(b, dtype=float), A @ self.cov @ A.T)


def _first_bad(mask: np.ndarray) -> tuple[int, ...] | None:
    if mask.ndim == 0:
        return None
    idx = np.argwhere(mask)[0]
    return tuple(int(i) for i in idx)


def validate_params(params: np.ndarray, min_det: float = MIN_DET) -> None:
    """Check a ``(..., 5)`` parameter array; raise naming the first bad entry."""
    params = np.asarray(params, dtype=float)
    sx, sy, rho = params[..., 2], params[..., 3], params[..., 4]
    finite = np.all(np.isfinite(params), axis=-1)
    det = sx**2 * sy**2 * (1.0 - rho**2)
    ok = finite & (sx > 0) & (sy > 0) & (np.abs(rho) < 1.0) & (det >= min_det)
    if not np.all(ok):
        raise InvalidCovarianceError("invalid predicted covariance", _first_bad(~ok))


def covariance_matrices(params: np.ndarray) -> np.ndarray:
    """``(..., 5)`` parameters to ``(..., 2, 2)`` covariance matrices."""
    params = np.asarray(params, dtype=float)
    sx, sy, rho = params[..., 2], params[..., 3], params[..., 4]
    out = np.empty(params.shape[:-1] + (2, 2))
    out[..., 0, 0] = sx**2
    out[..., 1, 1] = sy**2
    out[..., 0, 1] = out[..., 1, 0] = rho * sx * sy
    return out


def params_from_cov(mu: np.ndarray, cov: np.ndarray) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    cov = np.asarray(cov, dtype=float)
    sx = np.sqrt(cov[..., 0, 0])
    sy = np.sqrt(cov[..., 1, 1])
    rho = cov[..., 0, 1] / (sx * sy)
    return np.concatenate([mu, sx[..., None], sy[..., None], rho[..., None]], axis=-1)


def mahalanobis_sq_batch(points: np.ndarray, params: np.ndarray, check: bool = True) -> np.ndarray:
    """Squared Mahalanobis distance of ``points (..., 2)`` under ``params (..., 5)``.

    Uses the closed-form 2x2 inverse written in the correlation form
    ``(zx^2 - 2 rho zx zy + zy^2) / (1 - rho^2)``.
    """
    params = np.asarray(params, dtype=float)
    points = np.asarray(points, dtype=float)
    if check:
        validate_params(params)
    zx = (points[..., 0] - params[..., 0]) / params[..., 2]
    zy = (points[..., 1] - params[..., 1]) / params[..., 3]
    rho = params[..., 4]
    d2 = (zx * zx - 2.0 * rho * zx * zy + zy * zy) / (1.0 - rho * rho)
    return np.maximum(d2, 0.0)


def mahalanobis_sq(p, g: Gaussian2) -> float:
    pt = p.as_array() if isinstance(p, Point2) else np.asarray(p, dtype=float)
    if g.det < MIN_DET:
        raise InvalidCovarianceError(f"covariance determinant {g.det:.3g} below {MIN_DET}")
    return float(mahalanobis_sq_batch(pt, g.as_array(), check=False))


def chi2_cdf_2dof(d2):
    """CDF of the chi-squared law with two degrees of freedom, ``1 - exp(-x/2)``."""
    x = np.asarray(d2, dtype=float)
    if np.any(x < 0) or np.any(np.isnan(x)):
        raise ValueError("chi2 CDF argument must be non-negative")
    out = -np.expm1(-0.5 * x)
    return float(out) if out.ndim == 0 else out


def chi2_quantile_2dof(p):
    """Inverse of :func:`chi2_cdf_2dof`: ``-2 ln(1 - p)``."""
    q = np.asarray(p, dtype=float)
    if np.any(q < 0) or np.any(q >= 1) or np.any(np.isnan(q)):
        raise ValueError("probability must lie in [0, 1)")
    out = -2.0 * np.log1p(-q)
    return float(out) if out.ndim == 0 else out


def contains_at_level(p, g: Gaussian2, level: float) -> bool:
    return mahalanobis_sq(p, g) <= chi2_quantile_2dof(level)


def sample_batch(params: np.ndarray, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Draw points from each Gaussian in ``params (..., 5)``.

    With ``n`` given the result has shape ``(n, ..., 2)``, otherwise ``(..., 2)``.
    Only the structural invariants are required here, so near-degenerate
    widths are allowed.
    """
    params = np.asarray(params, dtype=float)
    shape = params.shape[:-1] if n is None else (n,) + params.shape[:-1]
    z = rng.standard_normal(shape + (2,))
    sx, sy, rho = params[..., 2], params[..., 3], params[..., 4]
    x = params[..., 0] + sx * z[..., 0]
    y = params[..., 1] + sy * (rho * z[..., 0] + np.sqrt(1.0 - rho * rho) * z[..., 1])
    return np.stack([x, y], axis=-1)


def sample(g: Gaussian2, rng: np.random.Generator) -> Point2:
    x, y = sample_batch(g.as_array(), rng)
    return Point2(float(x), float(y))


def ellipse_points(g: Gaussian2, level: float, n: int = 64) -> list[Point2]:
    """``n`` points on the boundary of the ``level`` confidence ellipse."""
    if n < 3:
        raise ValueError("need at least 3 ellipse points")
    radius = math.sqrt(chi2_quantile_2dof(level))
    evals, evecs = np.linalg.eigh(g.cov)
    theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    unit = np.stack([np.cos(theta), np.sin(theta)])
    pts = g.mean[:, None] + radius * (evecs * np.sqrt(evals)) @ unit
    return [Point2(float(x), float(y)) for x, y in pts.T]
