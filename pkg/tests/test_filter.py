import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from conftest import assert_fd_close, finite_difference_grad
from steinpf.filter import (
    FilterError,
    SirState,
    SteinState,
    WeightedEnsemble,
    initial_target,
    normalize_log_weights,
    resample_systematic,
    sequential_target,
    sir_initial,
    sir_step,
    stein_initial_step,
    stein_sequential_step,
    stein_window_initial,
    stein_window_step,
    window_target,
)
from steinpf.model import benes_spec, discretize, linear_gaussian_spec, simulate
from steinpf.reference import discrete_kalman_path
from steinpf.svgd import KernelConfig, SvgdConfig

FAST = SvgdConfig(iterations=20, step_size=0.01, schedule="rmsprop")


def observations(model, steps, seed=0):
    return simulate(model, steps, np.random.default_rng(seed))[1]


# ---------------------------------------------------------------- SIR


def test_normalize_log_weights_is_shift_stable():
    w, ok = normalize_log_weights(np.array([-1000.0, -1001.0, -1002.0]))
    assert ok
    expected = np.exp([0.0, -1.0, -2.0])
    np.testing.assert_allclose(w, expected / expected.sum(), rtol=1e-14)


def test_normalize_log_weights_all_underflow_resets():
    w, ok = normalize_log_weights(np.full(4, -np.inf))
    assert not ok
    np.testing.assert_array_equal(w, np.full(4, 0.25))


def test_systematic_resampling_hand_example():
    ens = WeightedEnsemble(np.arange(4.0)[:, None], np.array([0.1, 0.4, 0.0, 0.5]))
    out = resample_systematic(ens, np.random.default_rng(0), offset=0.125)
    # positions 0.125, 0.375, 0.625, 0.875 against cdf 0.1, 0.5, 0.5, 1.0
    np.testing.assert_array_equal(out.particles[:, 0], [1.0, 1.0, 3.0, 3.0])
    np.testing.assert_array_equal(out.weights, np.full(4, 0.25))


def test_systematic_copy_counts_are_unbiased():
    rng = np.random.default_rng(1)
    n, trials = 10, 10_000
    w = rng.dirichlet(np.ones(n))
    ens = WeightedEnsemble(np.arange(n, dtype=float)[:, None], w)
    counts = np.zeros(n)
    for _ in range(trials):
        out = resample_systematic(ens, rng)
        counts += np.bincount(out.particles[:, 0].astype(int), minlength=n)
    mean_counts = counts / trials
    # every copy count is floor(n w) or ceil(n w); its mean over independent
    # trials must sit inside a 5-sigma binomial band around n w
    frac = n * w - np.floor(n * w)
    lo = np.floor(n * w) + binom.ppf(1e-7, trials, frac) / trials
    hi = np.floor(n * w) + binom.isf(1e-7, trials, frac) / trials
    assert np.all(mean_counts >= lo - 1e-12) and np.all(mean_counts <= hi + 1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(1, 30))
def test_systematic_copies_are_floor_or_ceil(seed, n):
    rng = np.random.default_rng(seed)
    w = rng.dirichlet(np.ones(n))
    out = resample_systematic(WeightedEnsemble(np.arange(n, dtype=float)[:, None], w), rng)
    counts = np.bincount(out.particles[:, 0].astype(int), minlength=n)
    assert counts.sum() == n
    assert np.all(counts >= np.floor(n * w - 1e-9)) and np.all(counts <= np.ceil(n * w + 1e-9))


@pytest.mark.parametrize("threshold", [0.0, 0.5, 1.0])
def test_sir_weights_stay_normalized(any_model, threshold):
    obs = observations(any_model, 50, seed=3)
    rng = np.random.default_rng(4)
    state = sir_initial(any_model, obs[0], 100, rng, ess_threshold=threshold)
    for k in range(50):
        if k:
            state = sir_step(state, any_model, obs[k], rng)
        w = state.ensemble.weights
        assert abs(w.sum() - 1.0) < 1e-12
        assert np.all(w >= 0)
        assert state.ess <= 100 + 1e-9
        assert state.ensemble.n == 100
        if state.resampled:
            np.testing.assert_array_equal(w, np.full(100, 0.01))
        if threshold == 0.0:
            assert not state.resampled
        if threshold == 1.0 and state.ess < 100 - 1e-9:
            assert state.resampled


def test_sir_posterior_ensemble_is_a_copy(linear_model):
    obs = observations(linear_model, 2)
    state = sir_initial(linear_model, obs[0], 50, np.random.default_rng(0), ess_threshold=0.0)
    before = state.ensemble.weights.copy()
    view = state.posterior_ensemble(np.random.default_rng(1))
    assert view.shape == (50, 1)
    np.testing.assert_array_equal(state.ensemble.weights, before)


def test_sir_counts_degeneracy(linear_model):
    rng = np.random.default_rng(0)
    # log-weights keep huge innovations finite; only an infinite one degenerates
    assert sir_initial(linear_model, np.array([1e6]), 10, rng).degeneracy_events == 0
    with np.errstate(over="ignore"):
        state = sir_initial(linear_model, np.array([1e200]), 10, rng)
    assert state.degeneracy_events == 1
    np.testing.assert_array_equal(state.ensemble.weights, np.full(10, 0.1))


def test_sir_step_type_check(linear_model):
    with pytest.raises(TypeError):
        sir_step(SteinState(np.zeros((3, 1)), 0), linear_model, np.zeros(1), np.random.default_rng(0))


# ---------------------------------------------------------------- targets


def _fd_check(target, x):
    fd = finite_difference_grad(target.log_density, x, 1e-5)
    assert_fd_close(target.grad_log_density(x), fd)


def test_initial_target_gradient(any_model, rng):
    _fd_check(initial_target(any_model, np.array([1.3])), rng.normal(0.5, 1.0, size=(50, 1)))


def test_sequential_target_gradient(any_model, rng):
    prev = rng.normal(0.0, 0.5, size=(40, 1))
    target = sequential_target(prev, any_model, np.array([0.7]))
    _fd_check(target, rng.normal(0.0, 0.6, size=(50, 1)))


@pytest.mark.parametrize("w", [1, 2, 3, 5])
def test_warmup_window_target_gradient(any_model, rng, w):
    obs = rng.normal(size=(w, 1))
    _fd_check(window_target(any_model, obs), rng.normal(0.0, 0.5, size=(50, w)))


@pytest.mark.parametrize("w", [1, 3, 4])
def test_steady_window_target_gradient(any_model, rng, w):
    obs = rng.normal(size=(w, 1))
    anchors = rng.normal(0.0, 0.5, size=(30, 1))
    _fd_check(window_target(any_model, obs, anchors), rng.normal(0.0, 0.5, size=(50, w)))


def test_mixture_gradient_survives_far_points(linear_model):
    prev = np.linspace(-1, 1, 20)[:, None]
    target = sequential_target(prev, linear_model, np.array([0.0]))
    with np.errstate(over="raise", invalid="raise", divide="raise"):
        g = target.grad_log_density(np.array([[60.0], [-60.0]]))
    assert np.all(np.isfinite(g))
    # far to the right the nearest centre (0.99) dominates
    expected = -(60.0 - 0.99) / 0.02 + 3.0 * (0.0 - 180.0) / 12.5
    assert g[0, 0] == pytest.approx(expected, rel=1e-12)


def test_single_component_mixture_is_gaussian(linear_model):
    target = sequential_target(np.array([[1.0]]), linear_model, np.array([0.0]))
    x = np.array([[0.2], [1.5]])
    expected = -(x - 0.99) / 0.02 - 3.0 * 3.0 * x / 12.5
    np.testing.assert_allclose(target.grad_log_density(x), expected, rtol=1e-13)


def test_window_target_checks_dimension(linear_model):
    target = window_target(linear_model, np.zeros((3, 1)))
    with pytest.raises(ValueError):
        target.grad_log_density(np.zeros((4, 2)))
    with pytest.raises(ValueError):
        window_target(linear_model, np.zeros((3, 2)))


# ---------------------------------------------------------------- Stein filters


def test_sequential_stein_keeps_n(benes_model):
    obs = observations(benes_model, 5)
    rng = np.random.default_rng(0)
    state = stein_initial_step(benes_model, obs[0], 25, FAST, rng)
    for z in obs[1:]:
        state = stein_sequential_step(state, benes_model, z, FAST, rng)
        assert state.particles.shape == (25, 1)
    assert state.time_index == 4


def test_previous_initialization_option(linear_model):
    obs = observations(linear_model, 2)
    rng = np.random.default_rng(0)
    state = stein_initial_step(linear_model, obs[0], 10, FAST, rng)
    cfg0 = SvgdConfig(iterations=0)
    same = stein_sequential_step(state, linear_model, obs[1], cfg0, rng, init="previous")
    np.testing.assert_array_equal(same.particles, state.particles)
    with pytest.raises(ValueError):
        stein_sequential_step(state, linear_model, obs[1], FAST, rng, init="prior")


@pytest.mark.parametrize("big_t", [1, 2, 3])
def test_window_length_bookkeeping(linear_model, big_t):
    obs = observations(linear_model, 6)
    rng = np.random.default_rng(0)
    state = stein_window_initial(linear_model, obs[0], 12, big_t, FAST, rng)
    assert state.trajectories.window == 1
    for t in range(1, 6):
        state = stein_window_step(state, linear_model, obs[t], FAST, rng)
        assert state.trajectories.window == min(t + 1, big_t)
        assert state.trajectories.particles.shape == (12, min(t + 1, big_t))
        assert state.observations.shape == (min(t + 1, big_t), 1)
        assert len(state.filtered) == min(t + 1, big_t)
        np.testing.assert_array_equal(state.filtered[-1], state.trajectories.newest())


def test_window_rejects_zero_length(linear_model):
    with pytest.raises(ValueError):
        stein_window_initial(linear_model, np.zeros(1), 5, 0, FAST, np.random.default_rng(0))


@pytest.mark.parametrize("name", ["linear", "benes"])
@pytest.mark.parametrize("bandwidth", ["median", 0.05])
def test_window_of_one_equals_sequential_bit_exactly(name, bandwidth):
    model = discretize(linear_gaussian_spec() if name == "linear" else benes_spec())
    obs = observations(model, 25, seed=11)
    cfg = SvgdConfig(iterations=15, step_size=0.01, schedule="rmsprop", kernel=KernelConfig(bandwidth))
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    seq = stein_initial_step(model, obs[0], 30, cfg, r1)
    win = stein_window_initial(model, obs[0], 30, 1, cfg, r2)
    np.testing.assert_array_equal(seq.particles, win.trajectories.newest())
    for z in obs[1:]:
        seq = stein_sequential_step(seq, model, z, cfg, r1)
        win = stein_window_step(win, model, z, cfg, r2)
        np.testing.assert_array_equal(seq.particles, win.trajectories.newest())


def test_svgd_failure_becomes_filter_error(linear_model):
    cfg = SvgdConfig(iterations=50, step_size=1e6)
    with pytest.raises(FilterError, match="t=0"):
        stein_initial_step(linear_model, np.array([100.0]), 10, cfg, np.random.default_rng(0))


def _backend_means(model, obs, backend, n, seed):
    rng = np.random.default_rng(seed)
    cfg = SvgdConfig(iterations=100, step_size=0.01, schedule="rmsprop")
    out = []
    if backend == "sir":
        state = sir_initial(model, obs[0], n, rng)
    elif backend == "seq":
        state = stein_initial_step(model, obs[0], n, cfg, rng)
    else:
        state = stein_window_initial(model, obs[0], n, 3, cfg, rng)
    out.append(state.moments()[0][0])
    for z in obs[1:]:
        if backend == "sir":
            state = sir_step(state, model, z, rng)
        elif backend == "seq":
            state = stein_sequential_step(state, model, z, cfg, rng)
        else:
            state = stein_window_step(state, model, z, cfg, rng)
        out.append(state.moments()[0][0])
    return np.array(out)


@pytest.mark.slow
@pytest.mark.parametrize("backend", ["sir", "seq", "window"])
def test_backends_track_the_exact_kalman_mean(linear_model, backend):
    """Over 10 seeds the mean error is within 4 standard errors of zero."""
    m, steps, n = 10, 5, 500
    errors = []
    for seed in range(m):
        obs = observations(linear_model, steps, seed=100 + seed)
        ref, _ = discrete_kalman_path(obs, [[0.99]], [[0.02]], [[3.0]], [[12.5]], linear_model.initial.mean, linear_model.initial.cov)
        errors.append(_backend_means(linear_model, obs, backend, n, seed) - ref[:, 0])
    errors = np.array(errors)
    se = errors.std(axis=0, ddof=1) / np.sqrt(m)
    assert np.all(np.abs(errors.mean(axis=0)) <= 4 * se + 1e-12)
