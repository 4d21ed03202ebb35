import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import assert_fd_close, finite_difference_grad
from steinpf.model import (
    ContinuousModelSpec,
    GaussianObservationModel,
    GaussianTransitionModel,
    InitialDistribution,
    ModelError,
    StateSpaceModel,
    benes_spec,
    discretize,
    grad_log_transition,
    linear_gaussian_spec,
    simulate,
)


def scalar_linear_model(f=0.99, q=0.02, h=3.0, r=12.5, m1=1.0, p1=1.0):
    return StateSpaceModel(
        1,
        1,
        InitialDistribution([m1], [[p1]]),
        GaussianTransitionModel(lambda x: f * x, lambda x: np.full((x.shape[0], 1, 1), f), [[q]]),
        GaussianObservationModel(lambda x: h * x, lambda x: np.full((x.shape[0], 1, 1), h), [[r]]),
    )


def test_linear_discretization_constants(linear_model):
    x = np.array([[2.0], [-1.0]])
    np.testing.assert_allclose(linear_model.transition.mean(x), 0.99 * x, rtol=1e-15)
    np.testing.assert_allclose(linear_model.transition.noise_cov, [[0.02]], rtol=1e-15)
    np.testing.assert_allclose(linear_model.observation.obs_noise_cov, [[12.5]], rtol=1e-12)
    np.testing.assert_allclose(linear_model.observation.obs_map(x), 3 * x)


def test_benes_discretization_constants(benes_model):
    x = np.linspace(-2, 2, 7)[:, None]
    np.testing.assert_allclose(benes_model.transition.mean(x), x + 0.03 * np.tanh(x / 3) * 0.02, rtol=1e-14)
    np.testing.assert_allclose(benes_model.transition.noise_cov, [[0.09 * 0.02]], rtol=1e-12)
    np.testing.assert_allclose(benes_model.observation.obs_noise_cov, [[50.0]], rtol=1e-12)


def test_driftless_unit_step():
    spec = ContinuousModelSpec(
        sde_drift=lambda x: np.zeros_like(x),
        sde_drift_jacobian=lambda x: np.zeros((x.shape[0], 2, 2)),
        sde_diffusion=np.eye(2),
        obs_drift=lambda x: x,
        obs_drift_jacobian=lambda x: np.broadcast_to(np.eye(2), (x.shape[0], 2, 2)),
        obs_diffusion=np.eye(2),
        dt=1.0,
        x0_mean=np.zeros(2),
        x0_cov=np.eye(2),
    )
    model = discretize(spec)
    x = np.array([[1.0, -3.0]])
    np.testing.assert_array_equal(model.transition.mean(x), x)
    np.testing.assert_array_equal(model.transition.noise_cov, np.eye(2))


def test_initial_law_is_pushed_to_first_observation_time(linear_model):
    # N(1, 1) through x -> 0.99 x + N(0, 0.02)
    np.testing.assert_allclose(linear_model.initial.mean, [0.99])
    np.testing.assert_allclose(linear_model.initial.cov, [[0.99**2 + 0.02]])


@pytest.mark.parametrize("dt", [0.0, -0.1, np.nan])
def test_discretize_rejects_bad_dt(dt):
    with pytest.raises(ModelError, match="dt"):
        discretize(linear_gaussian_spec(dt=dt))


def test_discretize_rejects_singular_diffusion():
    with pytest.raises(ModelError, match="full rank"):
        discretize(linear_gaussian_spec(diffusion=0.0))


def test_non_spd_covariance_rejected():
    with pytest.raises(ModelError):
        InitialDistribution([0.0, 0.0], [[1.0, 2.0], [2.0, 1.0]])


def test_grad_log_transition_hand_value(linear_model):
    np.testing.assert_allclose(grad_log_transition(linear_model, np.array([1.0]), np.array([1.0])), [-0.5], rtol=1e-12)
    x = np.array([[0.7]])
    np.testing.assert_array_equal(grad_log_transition(linear_model, 0.99 * x, x), [[0.0]])


def test_grad_log_transition_dimension_mismatch(linear_model):
    with pytest.raises(ModelError):
        grad_log_transition(linear_model, np.zeros(2), np.zeros(1))


def test_log_transition_is_normalized(benes_model):
    grid = np.linspace(-0.5, 0.7, 4001)
    dens = np.exp(benes_model.transition.log_density(grid[:, None], np.array([[0.1]])))
    assert np.trapezoid(dens, grid) == pytest.approx(1.0, abs=1e-8)


def test_log_transition_matches_sampler(benes_model, rng):
    x_prev = np.full((100_000, 1), 0.4)
    draws = benes_model.transition.sample(x_prev, rng)[:, 0]
    hist, edges = np.histogram(draws, bins=40, density=True)
    centres = 0.5 * (edges[1:] + edges[:-1])
    dens = np.exp(benes_model.transition.log_density(centres[:, None], np.array([[0.4]])))
    np.testing.assert_allclose(hist, dens, atol=0.05 * dens.max())


@pytest.mark.parametrize("name", ["linear", "benes"])
def test_gradients_match_finite_differences(name, rng):
    model = discretize(linear_gaussian_spec() if name == "linear" else benes_spec())
    x = rng.normal(0.0, 2.0, size=(100, 1))
    x_prev = rng.normal(0.0, 2.0, size=(100, 1))
    z = np.array([0.8])
    h = 1e-5
    fd_next = finite_difference_grad(lambda y: model.transition.log_density(y, x_prev), x, h)
    assert_fd_close(model.transition.grad_next(x, x_prev), fd_next)
    fd_prev = finite_difference_grad(lambda y: model.transition.log_density(x, y), x_prev, h)
    assert_fd_close(model.transition.grad_prev(x, x_prev), fd_prev)
    fd_lik = finite_difference_grad(lambda y: model.log_likelihood(z, y), x, h)
    assert_fd_close(model.grad_log_likelihood(z, x), fd_lik)
    fd_init = finite_difference_grad(model.initial.log_density, x, h)
    assert_fd_close(model.initial.grad_log_density(x), fd_init)


def test_transition_sampler_moments(linear_model, rng):
    x_prev = np.full((10_000, 1), 2.0)
    draws = linear_model.transition.sample(x_prev, rng)
    assert draws.mean() == pytest.approx(1.98, abs=0.01)
    assert draws.var(ddof=1) == pytest.approx(0.02, rel=0.05)


def test_simulate_second_state_variance(linear_model):
    """x_2 given x_1 = 0 has variance Q."""
    model = StateSpaceModel(
        1, 1, InitialDistribution([0.0], [[1e-24]]), linear_model.transition, linear_model.observation
    )
    x2 = np.array([simulate(model, 2, np.random.default_rng(s))[0][1, 0] for s in range(10_000)])
    assert x2.var(ddof=1) == pytest.approx(0.02, rel=0.05)


def test_simulate_noise_free_limit():
    model = scalar_linear_model(q=1e-20, r=1e-20, p1=1e-20)
    states, obs = simulate(model, 50, np.random.default_rng(0))
    np.testing.assert_allclose(states[:, 0], 0.99 ** np.arange(50), atol=1e-6)
    np.testing.assert_allclose(obs[:, 0], 3 * 0.99 ** np.arange(50), atol=1e-6)


def test_simulate_shapes_and_determinism(benes_model):
    a = simulate(benes_model, 50, np.random.default_rng(7))
    b = simulate(benes_model, 50, np.random.default_rng(7))
    assert a[0].shape == (50, 1) and a[1].shape == (50, 1)
    np.testing.assert_array_equal(a[0], b[0])
    np.testing.assert_array_equal(a[1], b[1])
    with pytest.raises(ValueError):
        simulate(benes_model, 0, np.random.default_rng(0))


def test_discretize_is_deterministic():
    a, b = discretize(benes_spec()), discretize(benes_spec())
    np.testing.assert_array_equal(a.transition.noise_cov, b.transition.noise_cov)
    np.testing.assert_array_equal(a.initial.cov, b.initial.cov)
    np.testing.assert_array_equal(a.observation.obs_noise_cov, b.observation.obs_noise_cov)


def test_benes_jacobian_finite_at_large_state(benes_model):
    with np.errstate(all="raise"):
        jac = benes_model.transition.drift_jacobian(np.array([[3000.0], [-3000.0]]))
    np.testing.assert_allclose(jac[:, 0, 0], 1.0)


@settings(max_examples=50, deadline=None)
@given(x_prev=st.floats(-10, 10), x_next=st.floats(-10, 10))
def test_transition_gradient_closed_form(x_prev, x_next):
    model = discretize(linear_gaussian_spec())
    g = grad_log_transition(model, np.array([x_next]), np.array([x_prev]))
    np.testing.assert_allclose(g, [-(x_next - 0.99 * x_prev) / 0.02], rtol=1e-12, atol=1e-9)
