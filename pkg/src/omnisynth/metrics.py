"""Evaluation metrics: reconstruction PSNR and feature-space plausibility.

The plausibility score is the mean squared Mahalanobis distance of rendered
view features under a Gaussian fitted to reference-image features. The
feature extractor is pluggable; the built-in deterministic baseline
concatenates a 4x4 mean-color grid with a gradient-magnitude histogram.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

__all__ = [
    "psnr",
    "FeatureGaussian",
    "fit_feature_gaussian",
    "nllf",
    "baseline_extractor",
    "BASELINE_FEATURE_DIM",
    "PSNR_CAP_DB",
]

PSNR_CAP_DB = 99.0
BASELINE_FEATURE_DIM = 64

FeatureExtractor = Callable[[np.ndarray], np.ndarray]


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


@dataclass
class FeatureGaussian:
    """Gaussian over feature space with a cached Cholesky factor."""

    mean: np.ndarray
    cov: np.ndarray
    shrinkage: float

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        d = len(self.mean)
        if self.cov.shape != (d, d):
            raise ValueError("covariance shape mismatch")
        if not np.allclose(self.cov, self.cov.T, atol=1e-10):
            raise ValueError("covariance must be symmetric")
        self._chol = np.linalg.cholesky(self.cov)

    @property
    def dim(self) -> int:
        return len(self.mean)

    def mahalanobis_sq(self, x: np.ndarray) -> np.ndarray:
        """Squared Mahalanobis distances of rows of x."""
        diff = np.atleast_2d(x) - self.mean[None, :]
        y = np.linalg.solve(self._chol, diff.T)
        return np.sum(y * y, axis=0)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal((n, self.dim))
        return self.mean[None, :] + z @ self._chol.T


def fit_feature_gaussian(crops: list[np.ndarray], extractor: FeatureExtractor) -> FeatureGaussian:
    """Sample mean/covariance of extracted features, with trace shrinkage.

    The covariance is regularized as cov + lam * I with
    lam = 1e-3 * trace(cov) / dim (floored at 1e-8 so degenerate inputs
    still yield a positive-definite matrix).

    Raises:
        ValueError: when the number of crops does not exceed the feature dim.
    """
    feats = np.stack([np.asarray(extractor(c), dtype=np.float64) for c in crops])
    n, d = feats.shape
    if n <= d:
        raise ValueError(f"need more than {d} crops to fit a {d}-dim Gaussian, got {n}")
    mean = feats.mean(axis=0)
    centered = feats - mean[None, :]
    cov = centered.T @ centered / (n - 1)
    cov = 0.5 * (cov + cov.T)
    lam = max(1e-3 * float(np.trace(cov)) / d, 1e-8)
    cov = cov + lam * np.eye(d)
    return FeatureGaussian(mean, cov, lam)


def nllf(views: list[np.ndarray], extractor: FeatureExtractor, gaussian: FeatureGaussian) -> float:
    """Mean squared Mahalanobis distance of rendered-view features.

    Computed exactly as the average of (x - mean)^T cov^-1 (x - mean); no
    log-determinant or 1/2 factor, so values are comparable only to other
    scores from the same reference Gaussian.
    """
    if len(views) < 1:
        raise ValueError("need at least one view")
    feats = np.stack([np.asarray(extractor(v), dtype=np.float64) for v in views])
    return float(np.mean(gaussian.mahalanobis_sq(feats)))


def baseline_extractor(image: np.ndarray) -> np.ndarray:
    """Deterministic 64-dim feature: 4x4 cell mean colors (48) followed by a
    16-bin gradient-magnitude histogram (normalized to unit mass)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got {img.shape}")
    h, w = img.shape[:2]
    cells = []
    for rows in np.array_split(np.arange(h), 4):
        for cols in np.array_split(np.arange(w), 4):
            cells.append(img[np.ix_(rows, cols)].mean(axis=(0, 1)))
    color = np.concatenate(cells)

    gray = img.mean(axis=2)
    gx = np.diff(gray, axis=1, append=gray[:, -1:])
    gy = np.diff(gray, axis=0, append=gray[-1:, :])
    mag = np.sqrt(gx * gx + gy * gy)
    hist, _ = np.histogram(np.clip(mag, 0.0, np.sqrt(2.0)), bins=16, range=(0.0, np.sqrt(2.0)))
    hist = hist.astype(np.float64) / mag.size
    return np.concatenate([color, hist])
