import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pode.errors import ConfigError, GridError
from pode.kalman import GaussianState
from pode.ode import OdeProblem, build_grid, default_slots, linearize, pad_to_prior_order


def _mixed():
    # second-order pendulum-like variable next to a first-order one
    def fun(x, t, th):
        return jnp.stack([-th[0] * jnp.sin(x[0]) + x[2], x[0] * x[2]])

    return OdeProblem((2, 1), fun, lambda th: jnp.array([0.5, 0.0, 1.0]), 1.0)


def test_selection_and_lift():
    padded = pad_to_prior_order(_mixed(), (4, 3))
    np.testing.assert_array_equal(np.nonzero(padded.W)[1], [2, 5])
    X = np.arange(7.0)
    np.testing.assert_array_equal(padded.natural(X), [0.0, 1.0, 4.0])
    np.testing.assert_array_equal(padded.block_mask.sum(1), [4, 3])
    np.testing.assert_array_equal(padded.solution_index, [0, 4])


def test_initial_state_fills_highest_derivative():
    padded = pad_to_prior_order(_mixed(), (4, 3))
    v = np.asarray(padded.initial(jnp.array([2.0])))
    np.testing.assert_allclose(v, [0.5, 0.0, -2 * np.sin(0.5) + 1.0, 0.0, 1.0, 0.5, 0.0])


def test_too_few_slots_rejected():
    with pytest.raises(ConfigError):
        pad_to_prior_order(_mixed(), (2, 3))
    with pytest.raises(ConfigError):
        pad_to_prior_order(_mixed(), (4,))


def test_default_slots():
    assert default_slots(_mixed()) == (4, 3)


def test_linearizations_agree_on_the_residual():
    padded = pad_to_prior_order(_mixed(), (4, 3))
    th = jnp.array([1.3])
    mu = jnp.linspace(-1.0, 1.0, 7)
    pred = GaussianState(mu, jnp.eye(7))
    resid = padded.W @ mu - padded.fun(mu, 0.0, th)
    for method in ("blockwise", "full", "zeroth"):
        lin = linearize(pred, padded, 0.0, th, method)
        np.testing.assert_allclose((padded.W + lin.B) @ mu + lin.a, resid, atol=1e-12)
    full = linearize(pred, padded, 0.0, th, "full")
    J = jax.jacfwd(lambda X: padded.fun(X, 0.0, th))(mu)
    np.testing.assert_allclose(full.B, -J, atol=1e-12)
    block = linearize(pred, padded, 0.0, th, "blockwise")
    np.testing.assert_allclose(block.B, -J * padded.block_mask, atol=1e-12)
    with pytest.raises(ConfigError):
        linearize(pred, padded, 0.0, th, "second")


@settings(max_examples=50, deadline=None)
@given(dt=st.sampled_from([0.01, 0.05, 0.1, 0.2, 0.25, 1.0]), data=st.data())
def test_grid_round_trip(dt, data):
    N = int(round(4.0 / dt))
    steps = sorted(data.draw(st.sets(st.integers(0, N), max_size=20)))
    grid = build_grid(dt, 4.0, [n * dt for n in steps])
    assert grid.N == N
    assert list(grid.obs_index) == steps
    for i, n in enumerate(steps):
        assert grid.obs_of(n) == i
        assert grid.step_of(i) == n


def test_grid_errors():
    with pytest.raises(GridError):
        build_grid(0.1, 1.0, [0.05])
    with pytest.raises(GridError):
        build_grid(0.1, 1.0, [1.1])
    with pytest.raises(GridError):
        build_grid(0.1, 1.0, [0.3, 0.2])
    with pytest.raises(GridError):
        build_grid(0.0, 1.0)
    with pytest.raises(GridError):
        build_grid(0.1, -1.0)


def test_obs_of_before_first_observation():
    grid = build_grid(0.1, 1.0, [0.5])
    assert grid.obs_of(3) == -1
    assert grid.obs_of(9) == 0
