"""Moments, m.s.e. curves, effective sample size and density diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.integrate import trapezoid

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass
class RunRecord:
    """Per-step outputs of one backend on one simulated path.

    Arrays are indexed by step: ``means`` is ``(K, d)``, ``covs`` ``(K, d, d)``,
    ``wall_time`` ``(K,)``. ``ess`` is only filled for SIR.
    """

    times: np.ndarray
    means: np.ndarray
    covs: np.ndarray
    ref_means: np.ndarray
    ref_covs: np.ndarray
    wall_time: np.ndarray
    ess: Optional[np.ndarray] = None
    kde: dict = field(default_factory=dict)
    l1: dict = field(default_factory=dict)

    def __post_init__(self):
        k = len(self.times)
        arrays = [self.means, self.covs, self.ref_means, self.ref_covs, self.wall_time]
        if self.ess is not None:
            arrays.append(self.ess)
        if any(len(a) != k for a in arrays):
            raise ValueError("RunRecord arrays must all have one entry per step")


def empirical_moments(particles, weights=None):
    """Mean and covariance of an ensemble.

    Unweighted: the 1/(n-1) sample covariance. Weighted: the reliability-weight
    unbiased estimate, which reduces to the former for uniform weights.
    """
    x = np.asarray(particles, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if n < 2:
        raise ValueError("covariance needs at least two particles")
    if weights is None:
        mean = x.mean(axis=0)
        dev = x - mean
        return mean, dev.T @ dev / (n - 1)
    w = np.asarray(weights, dtype=np.float64)
    mean = w @ x
    dev = x - mean
    return mean, (dev * w[:, None]).T @ dev / (1.0 - np.sum(w * w))


def mse_curves(means, covs, ref_means, ref_covs):
    """Per-step m.s.e. of mean and covariance over M runs.

    ``means`` is ``(M, K, d)`` and ``covs`` ``(M, K, d, d)``; references are
    ``(M, K, d)`` and ``(M, K, d, d)`` (each run has its own observation path,
    hence its own exact posterior). Squared errors are summed over vector
    components (squared Frobenius norm for covariances).

    Returns:
        ``(mse_mean, mse_cov)``, each of length K.
    """
    means, covs = np.asarray(means, dtype=np.float64), np.asarray(covs, dtype=np.float64)
    ref_means, ref_covs = np.asarray(ref_means, dtype=np.float64), np.asarray(ref_covs, dtype=np.float64)
    if means.shape != ref_means.shape or covs.shape != ref_covs.shape or means.shape[:2] != covs.shape[:2]:
        raise ValueError(
            f"shape mismatch: means {means.shape} vs {ref_means.shape}, covs {covs.shape} vs {ref_covs.shape}"
        )
    err_mu = ((means - ref_means) ** 2).reshape(means.shape[0], means.shape[1], -1).sum(axis=2)
    err_cov = ((covs - ref_covs) ** 2).reshape(covs.shape[0], covs.shape[1], -1).sum(axis=2)
    return err_mu.mean(axis=0), err_cov.mean(axis=0)


def kde(particles, grid, bandwidth: float, weights=None) -> np.ndarray:
    """Gaussian kernel density estimate of a scalar ensemble on ``grid``."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    grid = np.asarray(grid, dtype=np.float64).ravel()
    if grid.size == 0:
        raise ValueError("empty evaluation grid")
    x = np.asarray(particles, dtype=np.float64).ravel()
    w = np.full(x.size, 1.0 / x.size) if weights is None else np.asarray(weights, dtype=np.float64)
    u = (grid[:, None] - x[None, :]) / bandwidth
    return np.exp(-0.5 * u * u) @ w / (bandwidth * _SQRT_2PI)


def l1_density_distance(density_a, density_b, grid) -> float:
    """Trapezoid integral of |a - b|; lies in [0, 2] for densities."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.size < 10:
        warnings.warn(f"L1 distance on a coarse grid of {grid.size} points", RuntimeWarning)
    return float(trapezoid(np.abs(np.asarray(density_a) - np.asarray(density_b)), grid))


def effective_sample_size(weights) -> float:
    """1 / sum(w_i^2) for normalized weights."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise ValueError("weights must be a non-empty vector")
    if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
        raise ValueError(f"weights must be non-negative and sum to 1 (sum = {w.sum()!r})")
    return float(1.0 / np.sum(w * w))
