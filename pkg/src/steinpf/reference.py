"""Exact posteriors used as ground truth.

* Kalman-Bucy filter for the scalar linear model
  dx = a x dt + s dW, dy = c x dt + r dV, integrated with explicit Euler.
* Benes filter: for dx = mu sigma_B tanh(mu x / sigma_B) dt + sigma_B dW,
  dy = (h1 x + h1 h2) dt + dV and x_0 known, the posterior is the
  two-component Gaussian mixture
  c N(a - b, s^2) + (1 - c) N(a + b, s^2).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit


@dataclass(frozen=True)
class LinearParams:
    drift_coef: float = -0.5
    diffusion: float = 1.0
    obs_coef: float = 3.0
    obs_noise: float = 0.5


@dataclass(frozen=True)
class KalmanState:
    mu: float
    sigma: float
    t: float = 0.0


def riccati_rhs(sigma: float, p: LinearParams = LinearParams()) -> float:
    """dSigma/dt; with the default parameters -Sigma + 1 - 36 Sigma^2."""
    return 2.0 * p.drift_coef * sigma + p.diffusion**2 - (p.obs_coef / p.obs_noise) ** 2 * sigma**2


def stationary_variance(p: LinearParams = LinearParams()) -> float:
    """Positive root of the stationary Riccati equation."""
    g = (p.obs_coef / p.obs_noise) ** 2
    a2 = 2.0 * p.drift_coef
    return (a2 + np.sqrt(a2 * a2 + 4.0 * g * p.diffusion**2)) / (2.0 * g)


def kalman_step(state: KalmanState, dy: float, dt: float, p: LinearParams = LinearParams()) -> KalmanState:
    """One Euler step of the Kalman-Bucy mean SDE and Riccati ODE.

    mu    <- mu + a mu dt + K (dy - c mu dt),  K = c Sigma / r^2
    Sigma <- Sigma + (2 a Sigma + s^2 - (c/r)^2 Sigma^2) dt
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    gain = p.obs_coef * state.sigma / p.obs_noise**2
    mu = state.mu + p.drift_coef * state.mu * dt + gain * (dy - p.obs_coef * state.mu * dt)
    sigma = state.sigma + riccati_rhs(state.sigma, p) * dt
    if not sigma > 0:
        raise ValueError(f"Riccati update produced non-positive variance {sigma} (dt={dt} too large)")
    return KalmanState(mu, sigma, state.t + dt)


def kalman_path(dy: np.ndarray, dt: float, mu0: float = 1.0, sigma0: float = 1.0, p: LinearParams = LinearParams()):
    """Posterior means and variances after each observation increment.

    Returns:
        ``(mu, sigma)`` arrays of length ``len(dy)``; entry k is the posterior
        at time ``(k + 1) dt``.
    """
    dy = np.asarray(dy, dtype=np.float64).ravel()
    mu, sigma = np.empty(dy.size), np.empty(dy.size)
    state = KalmanState(mu0, sigma0)
    for k, inc in enumerate(dy):
        state = kalman_step(state, inc, dt, p)
        mu[k], sigma[k] = state.mu, state.sigma
    return mu, sigma


@dataclass(frozen=True)
class BenesParams:
    mu: float = 0.1
    sigma_b: float = 0.3
    h1: float = 5.0
    h2: float = 0.0
    x0: float = 0.0


@dataclass(frozen=True)
class BenesPosterior:
    a: float
    b: float
    sigma_sq: float
    c: float
    psi: float

    @property
    def mean(self) -> float:
        return self.a + self.b * (1.0 - 2.0 * self.c)

    @property
    def variance(self) -> float:
        return self.sigma_sq + 4.0 * self.c * (1.0 - self.c) * self.b**2

    def density(self, x) -> np.ndarray:
        return mixture_density(self, x)


def _normal_pdf(x, m, var):
    return np.exp(-0.5 * (x - m) ** 2 / var) / np.sqrt(2.0 * np.pi * var)


def mixture_density(post: BenesPosterior, x) -> np.ndarray:
    """c N(x; a - b, s^2) + (1 - c) N(x; a + b, s^2)."""
    x = np.asarray(x, dtype=np.float64)
    return post.c * _normal_pdf(x, post.a - post.b, post.sigma_sq) + (1.0 - post.c) * _normal_pdf(
        x, post.a + post.b, post.sigma_sq
    )


def _posterior_from_psi(psi: float, t: float, p: BenesParams) -> BenesPosterior:
    kt = p.h1 * p.sigma_b * t
    th = np.tanh(kt)
    a = p.sigma_b * psi * th + (p.h2 + p.x0) / np.cosh(kt) - p.h2
    b = p.mu / p.h1 * th
    sigma_sq = p.sigma_b / p.h1 * th
    c = expit(-2.0 * a * b / p.sigma_b / th)
    return BenesPosterior(float(a), float(b), float(sigma_sq), float(c), float(psi))


def benes_posterior(dy, t: float, p: BenesParams = BenesParams()) -> BenesPosterior:
    """Closed-form Benes posterior at time ``t``.

    ``dy`` are the observation increments on a uniform grid covering
    ``[0, t]``; the stochastic integral
    Psi_t = int_0^t sinh(h1 sigma_B s) / sinh(h1 sigma_B t) dY_s
    is a left-point sum over that grid.
    """
    if not t > 0:
        raise ValueError("Benes posterior is undefined at t <= 0")
    dy = np.asarray(dy, dtype=np.float64).ravel()
    k = p.h1 * p.sigma_b
    s = np.arange(dy.size) * (t / dy.size) if dy.size else np.zeros(0)
    psi = float(np.sum(np.sinh(k * s) * dy) / np.sinh(k * t))
    return _posterior_from_psi(psi, t, p)


def benes_path(dy: np.ndarray, dt: float, p: BenesParams = BenesParams()) -> list[BenesPosterior]:
    """Benes posteriors at times dt, 2 dt, ... for a stream of increments."""
    dy = np.asarray(dy, dtype=np.float64).ravel()
    k = p.h1 * p.sigma_b
    s = np.arange(dy.size) * dt
    partial = np.cumsum(np.sinh(k * s) * dy)
    times = (np.arange(dy.size) + 1) * dt
    return [_posterior_from_psi(partial[j] / np.sinh(k * times[j]), times[j], p) for j in range(dy.size)]


def discrete_kalman_path(observations, transition_matrix, noise_cov, obs_matrix, obs_noise_cov, mean1, cov1):
    """Exact filter for x_{k+1} = F x_k + N(0, Q), z_k = H x_k + N(0, R).

    This is the exact posterior of the Euler-discretized linear model that
    the particle filters actually run on, with x_1 ~ N(mean1, cov1) the law
    at the first observation time.

    Returns:
        ``(means, covs)`` of shapes ``(K, d)`` and ``(K, d, d)``; entry k is
        the posterior after observation k.
    """
    z = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if z.shape[0] == 1 and z.shape[1] != np.atleast_2d(obs_matrix).shape[0]:
        z = z.T
    f = np.atleast_2d(np.asarray(transition_matrix, dtype=np.float64))
    q = np.atleast_2d(np.asarray(noise_cov, dtype=np.float64))
    h = np.atleast_2d(np.asarray(obs_matrix, dtype=np.float64))
    r = np.atleast_2d(np.asarray(obs_noise_cov, dtype=np.float64))
    m = np.atleast_1d(np.asarray(mean1, dtype=np.float64)).copy()
    p = np.atleast_2d(np.asarray(cov1, dtype=np.float64)).copy()
    d = m.size
    means, covs = np.empty((z.shape[0], d)), np.empty((z.shape[0], d, d))
    for k in range(z.shape[0]):
        if k > 0:
            m = f @ m
            p = f @ p @ f.T + q
        s = h @ p @ h.T + r
        gain = np.linalg.solve(s, h @ p).T
        m = m + gain @ (z[k] - h @ m)
        p = p - gain @ s @ gain.T
        p = 0.5 * (p + p.T)
        means[k], covs[k] = m, p
    return means, covs
