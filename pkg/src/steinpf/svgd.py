"""Stein variational gradient descent with a Gaussian kernel.

Particles are plain ``(n, dim)`` float arrays and are always equally
weighted. The kernel is

    k(x, x') = exp(-||x - x'||^2 / h)

and each iteration moves every particle along

    phi(x_i) = 1/n sum_j [ k(x_j, x_i) grad log q(x_j) + grad_{x_j} k(x_j, x_i) ].
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.spatial.distance import pdist

logger = logging.getLogger(__name__)

DIVERGENCE_NORM = 1e8
SCHEDULES = ("constant", "adagrad", "rmsprop")


class SvgdError(RuntimeError):
    """Base class for failures inside the SVGD loop."""


class NonFiniteGradientError(SvgdError):
    def __init__(self, index: int, iteration: Optional[int] = None):
        self.index = index
        self.iteration = iteration
        where = "" if iteration is None else f" at iteration {iteration}"
        super().__init__(f"non-finite target gradient for particle {index}{where}")


class SvgdDivergenceError(SvgdError):
    def __init__(self, iteration: int, norm: float):
        self.iteration = iteration
        self.norm = norm
        super().__init__(f"SVGD diverged at iteration {iteration} (max particle norm {norm:.3g})")


@dataclass
class LogDensityTarget:
    """Unnormalized target density, described by its score.

    ``grad_log_density`` maps ``(n, dim) -> (n, dim)``. ``log_density``
    (``(n, dim) -> (n,)``, up to a constant) is optional and only used for
    diagnostics and gradient checks.
    """

    dim: int
    grad_log_density: Callable[[np.ndarray], np.ndarray]
    log_density: Optional[Callable[[np.ndarray], np.ndarray]] = None


@dataclass(frozen=True)
class KernelConfig:
    """Gaussian kernel bandwidth: a positive float, or ``"median"``.

    The median heuristic sets h = med^2 / log(n + 1), with med the median
    pairwise distance between particles.
    """

    bandwidth: Union[float, str] = "median"

    def __post_init__(self):
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "median":
                raise ValueError(f"unknown bandwidth policy {self.bandwidth!r}")
        elif not (np.isfinite(self.bandwidth) and self.bandwidth > 0):
            raise ValueError(f"bandwidth must be positive, got {self.bandwidth}")


@dataclass(frozen=True)
class SvgdConfig:
    """Iteration count ``L``, step size and its schedule, and kernel.

    Schedules, all per particle and coordinate:

    * ``"constant"``: x += eps * phi.
    * ``"adagrad"``: x += eps * phi / (fudge + sqrt(sum of past phi^2)).
    * ``"rmsprop"``: as adagrad, but the sum is replaced by an exponential
      moving average with weight ``decay`` on the past.
    """

    iterations: int = 100
    step_size: float = 0.01
    schedule: str = "constant"
    kernel: KernelConfig = field(default_factory=KernelConfig)
    decay: float = 0.9
    fudge: float = 1e-6

    def __post_init__(self):
        if int(self.iterations) != self.iterations or self.iterations < 0:
            raise ValueError(f"iterations must be a non-negative integer, got {self.iterations}")
        if not (np.isfinite(self.step_size) and self.step_size > 0):
            raise ValueError(f"step_size must be positive, got {self.step_size}")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"unknown step schedule {self.schedule!r}")


def median_bandwidth(particles: np.ndarray) -> float:
    n = particles.shape[0]
    if n < 2:
        return 1.0
    med = float(np.median(pdist(particles)))
    if med == 0.0:
        warnings.warn("all particles coincide; median bandwidth falls back to h = 1", RuntimeWarning)
        return 1.0
    return med**2 / np.log(n + 1.0)


def resolve_bandwidth(particles: np.ndarray, config: KernelConfig) -> float:
    if config.bandwidth == "median":
        return median_bandwidth(particles)
    return float(config.bandwidth)


def _kernel(particles: np.ndarray, h: float):
    diff = particles[:, None, :] - particles[None, :, :]
    sqdist = np.einsum("ijk,ijk->ij", diff, diff)
    return np.exp(-sqdist / h), diff


def kernel_matrix(particles: np.ndarray, config: KernelConfig):
    """Kernel values, their gradients in the first argument, and the bandwidth.

    Returns:
        ``(K, grad_K, h)`` where ``K[j, i] = k(x_j, x_i)`` and
        ``grad_K[j, i] = -(2 / h) (x_j - x_i) K[j, i]``, the gradient of
        ``k(x_j, x_i)`` with respect to ``x_j``.
    """
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if particles.shape[0] == 0:
        raise ValueError("empty ensemble")
    h = resolve_bandwidth(particles, config)
    k, diff = _kernel(particles, h)
    grad_k = -(2.0 / h) * diff * k[:, :, None]
    return k, grad_k, h


def _direction(particles: np.ndarray, scores: np.ndarray, h: float) -> np.ndarray:
    n = particles.shape[0]
    k, _ = _kernel(particles, h)
    # sum_j grad_{x_j} k(x_j, x_i) = (2/h) (x_i sum_j K_ji - sum_j K_ji x_j)
    repulsion = (2.0 / h) * (particles * k.sum(axis=0)[:, None] - k.T @ particles)
    return (k.T @ scores + repulsion) / n


def _scores(particles: np.ndarray, target: LogDensityTarget, iteration=None) -> np.ndarray:
    scores = np.asarray(target.grad_log_density(particles), dtype=np.float64)
    if scores.shape != particles.shape:
        raise ValueError(f"target gradient has shape {scores.shape}, expected {particles.shape}")
    bad = ~np.isfinite(scores).all(axis=1)
    if bad.any():
        raise NonFiniteGradientError(int(np.flatnonzero(bad)[0]), iteration)
    return scores


def update_direction(particles: np.ndarray, target: LogDensityTarget, config: KernelConfig) -> np.ndarray:
    """The SVGD velocity phi evaluated at every particle, shape ``(n, dim)``."""
    particles = np.atleast_2d(np.asarray(particles, dtype=np.float64))
    if target.dim != particles.shape[1]:
        raise ValueError(f"target dimension {target.dim} != particle dimension {particles.shape[1]}")
    scores = _scores(particles, target)
    return _direction(particles, scores, resolve_bandwidth(particles, config))


def run(
    initial: np.ndarray,
    target: LogDensityTarget,
    config: SvgdConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Run ``config.iterations`` SVGD steps from ``initial``.

    ``rng`` is accepted so every sampler shares one signature; SVGD itself is
    deterministic given the starting ensemble. The input array is not
    modified.

    Raises:
        SvgdDivergenceError: a particle left the ball of radius 1e8 or became
            non-finite.
        NonFiniteGradientError: the target returned NaN/Inf for a particle.
    """
    x = np.array(initial, dtype=np.float64, ndmin=2)
    if target.dim != x.shape[1]:
        raise ValueError(f"target dimension {target.dim} != particle dimension {x.shape[1]}")
    hist = None
    for it in range(config.iterations):
        scores = _scores(x, target, it)
        phi = _direction(x, scores, resolve_bandwidth(x, config.kernel))
        if config.schedule != "constant":
            sq = phi * phi
            if hist is None:
                hist = sq
            elif config.schedule == "adagrad":
                hist = hist + sq
            else:
                hist = config.decay * hist + (1.0 - config.decay) * sq
            phi = phi / (config.fudge + np.sqrt(hist))
        x = x + config.step_size * phi
        norm = float(np.max(np.linalg.norm(x, axis=1)))
        if not np.isfinite(norm) or norm > DIVERGENCE_NORM:
            raise SvgdDivergenceError(it, norm)
    return x
