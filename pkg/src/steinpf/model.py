"""Discrete-time state-space models with Gaussian noise.

Shapes follow one convention throughout: a batch of states is ``(n, d)``, a
batch of observations ``(n, l)``. Single states may be passed as ``(d,)`` to
the per-point helpers.

Continuous-time models

    dx = a(x) dt + sigma dW
    dy = h(x) dt + sigma_V dV

are turned into discrete ones by Euler discretization (see :func:`discretize`)::

    x_{k+1} = x_k + a(x_k) dt + N(0, sigma sigma^T dt)
    z_k     = (y_{k} - y_{k-1}) / dt = h(x_k) + N(0, sigma_V sigma_V^T / dt)
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

Map = Callable[[np.ndarray], np.ndarray]

_LOG_2PI = np.log(2.0 * np.pi)


class ModelError(ValueError):
    """Raised for invalid model parameters or mismatched dimensions."""


def _as_spd(mat, name: str) -> np.ndarray:
    mat = np.atleast_2d(np.asarray(mat, dtype=np.float64))
    if mat.shape[0] != mat.shape[1]:
        raise ModelError(f"{name} must be square, got shape {mat.shape}")
    if not np.allclose(mat, mat.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(mat).max())):
        raise ModelError(f"{name} must be symmetric")
    try:
        np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        raise ModelError(f"{name} is not positive definite") from None
    return mat


@dataclass(frozen=True, eq=False)
class _Gaussian:
    """Fixed-covariance Gaussian noise term; caches the precision factors."""

    cov: np.ndarray
    chol: np.ndarray = field(init=False, repr=False)
    prec: np.ndarray = field(init=False, repr=False)
    log_norm: float = field(init=False, repr=False)

    def __post_init__(self):
        chol = np.linalg.cholesky(self.cov)
        prec = np.linalg.inv(self.cov)
        prec = 0.5 * (prec + prec.T)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        object.__setattr__(self, "chol", chol)
        object.__setattr__(self, "prec", prec)
        object.__setattr__(self, "log_norm", -0.5 * (self.cov.shape[0] * _LOG_2PI + log_det))

    def log_density(self, resid: np.ndarray) -> np.ndarray:
        """Log N(resid; 0, cov) over the last axis."""
        quad = np.einsum("...i,ij,...j->...", resid, self.prec, resid)
        return self.log_norm - 0.5 * quad

    def sample(self, shape, rng: np.random.Generator) -> np.ndarray:
        eps = rng.standard_normal((*shape, self.cov.shape[0]))
        return eps @ self.chol.T


@dataclass(frozen=True, eq=False)
class InitialDistribution:
    """Gaussian law of the first state, N(mean, cov)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", _as_spd(self.cov, "initial covariance"))
        if self.cov.shape[0] != mean.shape[0]:
            raise ModelError("initial mean and covariance disagree in dimension")
        object.__setattr__(self, "_noise", _Gaussian(self.cov))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self._noise.sample((n,), rng)

    def log_density(self, x: np.ndarray) -> np.ndarray:
        return self._noise.log_density(np.asarray(x) - self.mean)

    def grad_log_density(self, x: np.ndarray) -> np.ndarray:
        return -(np.asarray(x) - self.mean) @ self._noise.prec


@dataclass(frozen=True, eq=False)
class GaussianTransitionModel:
    """p(x' | x) = N(x'; f(x), Q).

    ``drift`` maps ``(n, d) -> (n, d)`` and ``drift_jacobian`` maps
    ``(n, d) -> (n, d, d)``; both must be vectorized over the batch axis.
    """

    drift: Map
    drift_jacobian: Map
    noise_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "noise_cov", _as_spd(self.noise_cov, "transition covariance Q"))
        object.__setattr__(self, "_noise", _Gaussian(self.noise_cov))

    @property
    def dim(self) -> int:
        return self.noise_cov.shape[0]

    @property
    def precision(self) -> np.ndarray:
        return self._noise.prec

    @property
    def log_norm(self) -> float:
        return self._noise.log_norm

    def mean(self, x_prev: np.ndarray) -> np.ndarray:
        return self.drift(np.atleast_2d(x_prev))

    def sample(self, x_prev: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x_prev = np.atleast_2d(x_prev)
        return self.drift(x_prev) + self._noise.sample((x_prev.shape[0],), rng)

    def log_density(self, x_next: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        return self._noise.log_density(np.atleast_2d(x_next) - self.mean(x_prev))

    def grad_next(self, x_next: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        """Gradient of log p(x_next | x_prev) with respect to x_next."""
        return -(np.atleast_2d(x_next) - self.mean(x_prev)) @ self.precision

    def grad_prev(self, x_next: np.ndarray, x_prev: np.ndarray) -> np.ndarray:
        """Gradient of log p(x_next | x_prev) with respect to x_prev."""
        x_prev = np.atleast_2d(x_prev)
        scaled = (np.atleast_2d(x_next) - self.drift(x_prev)) @ self.precision
        return np.einsum("ni,nij->nj", scaled, self.drift_jacobian(x_prev))


@dataclass(frozen=True, eq=False)
class GaussianObservationModel:
    """p(z | x) = N(z; h(x), R_eff)."""

    obs_map: Map
    grad_obs_map: Map
    obs_noise_cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "obs_noise_cov", _as_spd(self.obs_noise_cov, "observation covariance"))
        object.__setattr__(self, "_noise", _Gaussian(self.obs_noise_cov))

    @property
    def dim(self) -> int:
        return self.obs_noise_cov.shape[0]

    def sample(self, x: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.obs_map(x) + self._noise.sample((x.shape[0],), rng)

    def log_likelihood(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        return self._noise.log_density(np.asarray(z) - self.obs_map(np.atleast_2d(x)))

    def grad_log_likelihood(self, z: np.ndarray, x: np.ndarray) -> np.ndarray:
        """J_h(x)^T R^{-1} (z - h(x)), one row per state."""
        x = np.atleast_2d(x)
        scaled = (np.asarray(z) - self.obs_map(x)) @ self._noise.prec
        return np.einsum("nl,nld->nd", scaled, self.grad_obs_map(x))


@dataclass(frozen=True, eq=False)
class StateSpaceModel:
    state_dim: int
    obs_dim: int
    initial: InitialDistribution
    transition: GaussianTransitionModel
    observation: GaussianObservationModel

    def __post_init__(self):
        if self.state_dim < 1 or self.obs_dim < 1:
            raise ModelError("state_dim and obs_dim must be positive")
        if self.initial.mean.shape[0] != self.state_dim or self.transition.dim != self.state_dim:
            raise ModelError("initial/transition dimension does not match state_dim")
        if self.observation.dim != self.obs_dim:
            raise ModelError("observation dimension does not match obs_dim")

    def log_transition(self, x_next, x_prev) -> np.ndarray:
        return self.transition.log_density(x_next, x_prev)

    def log_likelihood(self, z, x) -> np.ndarray:
        return self.observation.log_likelihood(z, x)

    def grad_log_likelihood(self, z, x) -> np.ndarray:
        return self.observation.grad_log_likelihood(z, x)


def _check_state(x, d: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (d,):
        raise ModelError(f"{name} has trailing dimension {x.shape[-1:]}, expected ({d},)")
    return x


def grad_log_transition(model: StateSpaceModel, x_next, x_prev) -> np.ndarray:
    """Gradient of log p(x_next | x_prev) with respect to x_next.

    Accepts single states ``(d,)`` or batches ``(n, d)``; returns the same
    leading shape as ``x_next``.
    """
    d = model.state_dim
    x_next = _check_state(x_next, d, "x_next")
    x_prev = _check_state(x_prev, d, "x_prev")
    grad = model.transition.grad_next(x_next, x_prev)
    return grad.reshape(np.broadcast_shapes(x_next.shape, x_prev.shape))


def simulate(model: StateSpaceModel, steps: int, rng: np.random.Generator):
    """Draw a state path and its observations.

    Returns:
        ``(states, observations)`` with shapes ``(steps, d)`` and ``(steps, l)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    states = np.empty((steps, model.state_dim))
    obs = np.empty((steps, model.obs_dim))
    x = model.initial.sample(1, rng)
    for k in range(steps):
        if k > 0:
            x = model.transition.sample(x, rng)
        states[k] = x[0]
        obs[k] = model.observation.sample(x, rng)[0]
    return states, obs


@dataclass(frozen=True, eq=False)
class ContinuousModelSpec:
    """dx = a(x) dt + sigma dW, dy = h_c(x) dt + sigma_V dV, sampled every ``dt``.

    ``x0_mean``/``x0_cov`` give the law of the state at time 0. The first
    observation is taken at time ``dt``.
    """

    sde_drift: Map
    sde_drift_jacobian: Map
    sde_diffusion: np.ndarray
    obs_drift: Map
    obs_drift_jacobian: Map
    obs_diffusion: np.ndarray
    dt: float
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    name: str = "custom"


def discretize(spec: ContinuousModelSpec) -> StateSpaceModel:
    """Euler discretization of a continuous-time model.

    Produces f(x) = x + a(x) dt, Q = sigma sigma^T dt and
    R_eff = sigma_V sigma_V^T / dt, the last coming from z = dy / dt.
    The initial distribution is the law at the first observation time, i.e.
    N(m0, P0) pushed through one step of the linearized transition.
    """
    dt = float(spec.dt)
    if not np.isfinite(dt) or dt <= 0.0:
        raise ModelError(f"dt must be positive, got {spec.dt}")
    sig = np.atleast_2d(np.asarray(spec.sde_diffusion, dtype=np.float64))
    sig_v = np.atleast_2d(np.asarray(spec.obs_diffusion, dtype=np.float64))
    for mat, label in ((sig, "state diffusion"), (sig_v, "observation diffusion")):
        if mat.shape[0] != mat.shape[1] or np.linalg.matrix_rank(mat) < mat.shape[0]:
            raise ModelError(f"{label} must be square and full rank, got {mat.tolist()}")
    d, l = sig.shape[0], sig_v.shape[0]

    a, a_jac = spec.sde_drift, spec.sde_drift_jacobian
    eye = np.eye(d)

    def drift(x):
        return x + a(x) * dt

    def drift_jacobian(x):
        return eye + a_jac(x) * dt

    q = sig @ sig.T * dt
    r_eff = sig_v @ sig_v.T / dt
    transition = GaussianTransitionModel(drift, drift_jacobian, q)
    observation = GaussianObservationModel(spec.obs_drift, spec.obs_drift_jacobian, r_eff)

    m0 = np.atleast_1d(np.asarray(spec.x0_mean, dtype=np.float64))
    p0 = np.atleast_2d(np.asarray(spec.x0_cov, dtype=np.float64))
    jac0 = drift_jacobian(m0[None, :])[0]
    initial = InitialDistribution(drift(m0[None, :])[0], jac0 @ p0 @ jac0.T + q)
    return StateSpaceModel(d, l, initial, transition, observation)


def linear_gaussian_spec(
    dt: float = 0.02,
    drift_coef: float = -0.5,
    diffusion: float = 1.0,
    obs_coef: float = 3.0,
    obs_noise: float = 0.5,
    x0_mean: float = 1.0,
    x0_var: float = 1.0,
) -> ContinuousModelSpec:
    """Scalar Ornstein-Uhlenbeck signal observed linearly.

    Defaults: dx = -x/2 dt + dW, dy = 3x dt + dV/2, x_0 ~ N(1, 1).
    """
    return ContinuousModelSpec(
        sde_drift=lambda x: drift_coef * x,
        sde_drift_jacobian=lambda x: np.full((x.shape[0], 1, 1), drift_coef),
        sde_diffusion=np.array([[diffusion]]),
        obs_drift=lambda x: obs_coef * x,
        obs_drift_jacobian=lambda x: np.full((x.shape[0], 1, 1), obs_coef),
        obs_diffusion=np.array([[obs_noise]]),
        dt=dt,
        x0_mean=np.array([x0_mean]),
        x0_cov=np.array([[x0_var]]),
        name="linear-gaussian",
    )


def benes_spec(
    dt: float = 0.02,
    mu: float = 0.1,
    sigma_b: float = 0.3,
    h1: float = 5.0,
    h2: float = 0.0,
    x0: float = 0.0,
    x0_var: float = 1e-4,
) -> ContinuousModelSpec:
    """Benes model dx = mu sigma_B tanh(mu x / sigma_B) dt + sigma_B dW,
    dy = (h1 x + h1 h2) dt + dV.

    The point-mass start x0 is widened to variance ``x0_var`` so the initial
    log-density has a gradient.
    """
    k = mu / sigma_b
    scale = mu * sigma_b

    def drift(x):
        return scale * np.tanh(k * x)

    def drift_jac(x):
        return (scale * k * (1.0 - np.tanh(k * x) ** 2))[:, :, None]

    return ContinuousModelSpec(
        sde_drift=drift,
        sde_drift_jacobian=drift_jac,
        sde_diffusion=np.array([[sigma_b]]),
        obs_drift=lambda x: h1 * x + h1 * h2,
        obs_drift_jacobian=lambda x: np.full((x.shape[0], 1, 1), h1),
        obs_diffusion=np.array([[1.0]]),
        dt=dt,
        x0_mean=np.array([x0]),
        x0_cov=np.array([[x0_var]]),
        name="benes",
    )
