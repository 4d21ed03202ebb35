"""Particle filters: SIR, sequential Stein and sliding-window Stein.

Every backend follows the same pattern: an ``*_initial`` function assimilates
the first observation and returns a state object, and a ``*_step`` function
maps ``(state, model, z, ..., rng)`` to the next state. States expose
``posterior_ensemble`` (equally weighted samples of the current state) and
``moments`` (mean and covariance of the current posterior approximation).

Stein backends replace importance weighting by an SVGD run against an
unnormalized posterior. With the previous posterior represented by equally
weighted particles ``x_t^i`` the one-step target is

    q(x) = [1/n sum_i p(x | x_t^i)] p(z | x)

and the window variant targets the joint posterior of the last ``T`` states.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import svgd
from .metrics import effective_sample_size  # noqa: F401  (re-exported)
from .model import StateSpaceModel
from .svgd import LogDensityTarget, SvgdConfig, SvgdError

logger = logging.getLogger(__name__)


class FilterError(RuntimeError):
    """A filter step could not be completed."""


# --------------------------------------------------------------------------
# SIR
# --------------------------------------------------------------------------


@dataclass
class WeightedEnsemble:
    particles: np.ndarray
    weights: np.ndarray

    @property
    def n(self) -> int:
        return self.particles.shape[0]


def normalize_log_weights(log_w: np.ndarray):
    """Normalize log weights with a max shift.

    Returns:
        ``(weights, ok)``; ``ok`` is False when every weight underflowed (or
        was NaN), in which case uniform weights are returned.
    """
    log_w = np.asarray(log_w, dtype=np.float64)
    top = np.max(log_w)
    if not np.isfinite(top):
        return np.full(log_w.shape, 1.0 / log_w.size), False
    w = np.exp(log_w - top)
    return w / w.sum(), True


def resample_systematic(
    ensemble: WeightedEnsemble, rng: np.random.Generator, offset: Optional[float] = None
) -> WeightedEnsemble:
    """Systematic resampling with one uniform offset and stride 1/n.

    ``offset`` (in ``[0, 1/n)``) overrides the random draw.
    """
    n = ensemble.n
    u = rng.uniform(0.0, 1.0 / n) if offset is None else float(offset)
    positions = u + np.arange(n) / n
    cdf = np.cumsum(ensemble.weights)
    cdf[-1] = 1.0
    idx = np.minimum(np.searchsorted(cdf, positions, side="right"), n - 1)
    return WeightedEnsemble(ensemble.particles[idx].copy(), np.full(n, 1.0 / n))


@dataclass
class SirState:
    ensemble: WeightedEnsemble
    time_index: int
    ess_threshold: float = 0.5
    ess: float = float("nan")
    resampled: bool = False
    degeneracy_events: int = 0

    def posterior_ensemble(self, rng: np.random.Generator) -> np.ndarray:
        """Equally weighted view; resamples a copy, weights are untouched."""
        return resample_systematic(self.ensemble, rng).particles

    def moments(self):
        """Weighted mean and unbiased weighted covariance."""
        x, w = self.ensemble.particles, self.ensemble.weights
        mean = w @ x
        dev = x - mean
        cov = (dev * w[:, None]).T @ dev / (1.0 - np.sum(w * w))
        return mean, cov


def _sir_reweight(particles, log_w, model, z, ess_threshold, rng, t, events):
    log_w = log_w + model.log_likelihood(z, particles)
    weights, ok = normalize_log_weights(log_w)
    if not ok:
        events += 1
        logger.warning("SIR weight degeneracy at t=%d: all likelihoods underflowed, resetting weights", t)
    ens = WeightedEnsemble(particles, weights)
    ess = 1.0 / float(np.sum(weights * weights))
    resampled = ess < ess_threshold * ens.n
    if resampled:
        ens = resample_systematic(ens, rng)
    return SirState(ens, t, ess_threshold, ess, resampled, events)


def sir_initial(model: StateSpaceModel, z, n: int, rng: np.random.Generator, ess_threshold: float = 0.5) -> SirState:
    if n < 1:
        raise ValueError("n must be >= 1")
    particles = model.initial.sample(n, rng)
    return _sir_reweight(particles, np.zeros(n), model, z, ess_threshold, rng, 0, 0)


def sir_step(state: SirState, model: StateSpaceModel, z, rng: np.random.Generator) -> SirState:
    """Propagate through the dynamics, reweight by the likelihood, resample when
    ESS drops below ``ess_threshold * n``."""
    if not isinstance(state, SirState):
        raise TypeError("sir_step needs an SIR state")
    particles = model.transition.sample(state.ensemble.particles, rng)
    with np.errstate(divide="ignore"):
        log_w = np.log(state.ensemble.weights)
    return _sir_reweight(
        particles, log_w, model, z, state.ess_threshold, rng, state.time_index + 1, state.degeneracy_events
    )


# --------------------------------------------------------------------------
# Posterior targets
# --------------------------------------------------------------------------


def _mixture_grad(x: np.ndarray, centers: np.ndarray, prec: np.ndarray) -> np.ndarray:
    """Gradient of log sum_i N(x; c_i, Q) via softmax responsibilities."""
    resid = x[:, None, :] - centers[None, :, :]
    log_p = -0.5 * np.einsum("nmi,ij,nmj->nm", resid, prec, resid)
    log_p -= log_p.max(axis=1, keepdims=True)
    resp = np.exp(log_p)
    resp /= resp.sum(axis=1, keepdims=True)
    return -(x - resp @ centers) @ prec


def _mixture_log(x: np.ndarray, centers: np.ndarray, prec: np.ndarray, log_norm: float) -> np.ndarray:
    resid = x[:, None, :] - centers[None, :, :]
    log_p = log_norm - 0.5 * np.einsum("nmi,ij,nmj->nm", resid, prec, resid)
    return logsumexp(log_p, axis=1) - np.log(centers.shape[0])


def initial_target(model: StateSpaceModel, z) -> LogDensityTarget:
    """p(x_1 | z_1) up to a constant: p(z_1 | x_1) p(x_1)."""
    z = np.asarray(z, dtype=np.float64)

    def grad(x):
        return model.initial.grad_log_density(x) + model.grad_log_likelihood(z, x)

    def log_q(x):
        return model.initial.log_density(x) + model.log_likelihood(z, x)

    return LogDensityTarget(model.state_dim, grad, log_q)


def sequential_target(prev: np.ndarray, model: StateSpaceModel, z) -> LogDensityTarget:
    """[1/n sum_i p(x | x_t^i)] p(z | x) up to a constant."""
    prev = np.atleast_2d(np.asarray(prev, dtype=np.float64))
    if prev.shape[0] == 0:
        raise ValueError("previous ensemble is empty")
    z = np.asarray(z, dtype=np.float64)
    tr = model.transition
    centers = tr.mean(prev)

    def grad(x):
        return _mixture_grad(x, centers, tr.precision) + model.grad_log_likelihood(z, x)

    def log_q(x):
        return _mixture_log(x, centers, tr.precision, tr.log_norm) + model.log_likelihood(z, x)

    return LogDensityTarget(model.state_dim, grad, log_q)


def window_target(model: StateSpaceModel, observations, anchors: Optional[np.ndarray] = None) -> LogDensityTarget:
    """Joint posterior of ``w`` consecutive states, flattened to ``w * d``.

    ``observations`` holds one observation per block, oldest first. Without
    ``anchors`` (warm-up, the window starts at the first state) the oldest
    block carries the initial density p(x_1). With ``anchors`` (steady phase)
    it carries the particle mixture 1/n sum_i p(x | anchor_i); the posterior
    weight of each anchor is a constant 1/n under equal weighting and is
    dropped.
    """
    obs = np.atleast_2d(np.asarray(observations, dtype=np.float64))
    if obs.shape[1] != model.obs_dim:
        raise ValueError(f"observations have dimension {obs.shape[1]}, expected {model.obs_dim}")
    w, d = obs.shape[0], model.state_dim
    if w < 1:
        raise ValueError("window needs at least one observation")
    tr = model.transition
    centers = None if anchors is None else tr.mean(np.atleast_2d(anchors))

    def split(x):
        x = np.atleast_2d(x)
        if x.shape[1] != w * d:
            raise ValueError(f"trajectory dimension {x.shape[1]} does not match window {w} x {d}")
        return x.reshape(x.shape[0], w, d)

    def grad(x):
        blocks = split(x)
        g = np.empty_like(blocks)
        if centers is None:
            g[:, 0] = model.initial.grad_log_density(blocks[:, 0])
        else:
            g[:, 0] = _mixture_grad(blocks[:, 0], centers, tr.precision)
        for k in range(w):
            if k > 0:
                g[:, k] = tr.grad_next(blocks[:, k], blocks[:, k - 1])
            g[:, k] += model.grad_log_likelihood(obs[k], blocks[:, k])
        for k in range(1, w):
            g[:, k - 1] += tr.grad_prev(blocks[:, k], blocks[:, k - 1])
        return g.reshape(x.shape)

    def log_q(x):
        blocks = split(x)
        if centers is None:
            out = model.initial.log_density(blocks[:, 0])
        else:
            out = _mixture_log(blocks[:, 0], centers, tr.precision, tr.log_norm)
        for k in range(w):
            out = out + model.log_likelihood(obs[k], blocks[:, k])
            if k > 0:
                out = out + tr.log_density(blocks[:, k], blocks[:, k - 1])
        return out

    return LogDensityTarget(w * d, grad, log_q)


# --------------------------------------------------------------------------
# Stein filters
# --------------------------------------------------------------------------


def _run_svgd(x0, target, svgd_config, rng, t):
    try:
        return svgd.run(x0, target, svgd_config, rng)
    except SvgdError as exc:
        raise FilterError(f"SVGD failed at filter step t={t}: {exc}") from exc


def _moments(particles: np.ndarray):
    mean = particles.mean(axis=0)
    cov = np.atleast_2d(np.cov(particles, rowvar=False, ddof=1))
    return mean, cov


@dataclass
class SteinState:
    particles: np.ndarray
    time_index: int

    def posterior_ensemble(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return self.particles

    def moments(self):
        return _moments(self.particles)


def stein_initial_step(
    model: StateSpaceModel, z_1, n: int, svgd_config: SvgdConfig, rng: np.random.Generator
) -> SteinState:
    """Sample p(x_1) and transport the samples to p(x_1 | z_1) with SVGD."""
    if n < 1:
        raise ValueError("n must be >= 1")
    x0 = model.initial.sample(n, rng)
    return SteinState(_run_svgd(x0, initial_target(model, z_1), svgd_config, rng, 0), 0)


def stein_sequential_step(
    state: SteinState,
    model: StateSpaceModel,
    z,
    svgd_config: SvgdConfig,
    rng: np.random.Generator,
    init: str = "dynamics",
) -> SteinState:
    """One step of the sequential Stein filter.

    ``init="dynamics"`` starts SVGD from x^i ~ p(. | x_t^i); ``"previous"``
    starts from the previous particles themselves.
    """
    if not isinstance(state, SteinState):
        raise TypeError("stein_sequential_step needs a SteinState")
    prev = state.particles
    if init == "dynamics":
        x0 = model.transition.sample(prev, rng)
    elif init == "previous":
        x0 = prev.copy()
    else:
        raise ValueError(f"unknown initialization {init!r}")
    t = state.time_index + 1
    return SteinState(_run_svgd(x0, sequential_target(prev, model, z), svgd_config, rng, t), t)


@dataclass
class TrajectoryEnsemble:
    """n trajectories of ``window`` consecutive states, blocks oldest to newest."""

    particles: np.ndarray
    state_dim: int

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def window(self) -> int:
        return self.particles.shape[1] // self.state_dim

    def block(self, k: int) -> np.ndarray:
        d = self.state_dim
        k = k % self.window
        return self.particles[:, k * d : (k + 1) * d]

    def newest(self) -> np.ndarray:
        return self.block(-1)


@dataclass
class WindowState:
    """Sliding-window filter state.

    ``filtered`` keeps the newest-block output of the last ``T`` steps
    (oldest first); ``filtered[0]`` supplies the mixture anchors once the
    window is full.
    """

    trajectories: TrajectoryEnsemble
    observations: np.ndarray
    max_window: int
    time_index: int
    filtered: tuple = ()

    def posterior_ensemble(self, rng: Optional[np.random.Generator] = None) -> np.ndarray:
        return self.trajectories.newest()

    def moments(self):
        return _moments(self.trajectories.newest())


def stein_window_initial(
    model: StateSpaceModel, z_1, n: int, max_window: int, svgd_config: SvgdConfig, rng: np.random.Generator
) -> WindowState:
    if max_window < 1:
        raise ValueError("window length T must be >= 1")
    first = stein_initial_step(model, z_1, n, svgd_config, rng)
    obs = np.atleast_2d(np.asarray(z_1, dtype=np.float64))
    return WindowState(TrajectoryEnsemble(first.particles, model.state_dim), obs, max_window, 0, (first.particles,))


def stein_window_step(
    state: WindowState, model: StateSpaceModel, z, svgd_config: SvgdConfig, rng: np.random.Generator
) -> WindowState:
    """One step of the sliding-window Stein filter.

    The stored trajectories are extended by x^i ~ p(. | newest_i). While
    fewer than ``T`` states are stored, SVGD runs over the whole trajectory
    from the first state. Afterwards the oldest stored block is dropped, SVGD
    runs over the ``T`` newest blocks, and the first of them is tied to its
    predecessor through the mixture over the *filtered* ensemble of that
    predecessor. The oldest block of the stored window cannot serve as the
    anchor: it is already conditioned on the observations inside the window,
    which would then be counted twice.
    """
    if not isinstance(state, WindowState):
        raise TypeError("stein_window_step needs a WindowState")
    traj, d, big_t = state.trajectories, model.state_dim, state.max_window
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    new = model.transition.sample(traj.newest(), rng)
    t = state.time_index + 1
    if traj.window < big_t:
        x0 = np.concatenate([traj.particles, new], axis=1)
        obs = np.concatenate([state.observations, z], axis=0)
        target = window_target(model, obs)
    else:
        anchors = state.filtered[0]
        x0 = np.concatenate([traj.particles[:, d:], new], axis=1)
        obs = np.concatenate([state.observations[1:], z], axis=0)
        target = window_target(model, obs, anchors)
    out = _run_svgd(x0, target, svgd_config, rng, t)
    filtered = (*state.filtered, out[:, -d:])[-big_t:]
    return WindowState(TrajectoryEnsemble(out, d), obs, big_t, t, filtered)
