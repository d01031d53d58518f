"""Engines against dense joint-Gaussian conditioning on linear ODEs.

For an affine vector field the full linearization is exact, so every
engine must reproduce the oracle to rounding error.
"""

import jax.numpy as jnp
import numpy as np
import pytest

from pode import (
    GaussianMeasurement,
    IbmPrior,
    MeasurementSet,
    OdeProblem,
    build_grid,
    dalton_gaussian_loglik,
    dalton_nongaussian_loglik,
    datafree_filter,
    datafree_smooth,
    evaluate,
    fenrir_loglik,
    poisson_measurement,
    quadratic_measurement,
    solve,
)
from pode.errors import ConfigError, UnsupportedError
from pode.models import get_model, simulate_data
from pode.oracle import condition, linear_ode_joint, linear_ode_loglik, marginal_loglik


def linear_case(seed, d=2, slots=3, dt=0.1, N=6):
    rng = np.random.default_rng(seed)
    M = rng.normal(size=(d, d))
    k = rng.normal(size=d)
    x0 = rng.normal(size=d)
    Mj, kj, x0j = jnp.asarray(M), jnp.asarray(k), jnp.asarray(x0)
    prob = OdeProblem((1,) * d, lambda x, t, th: Mj @ x + kj, lambda th: x0j, N * dt)
    prior = IbmPrior((slots,) * d, tuple(rng.uniform(0.5, 2.0, d)))
    steps = np.sort(rng.choice(N + 1, size=3, replace=False))
    times = steps * dt
    grid = build_grid(dt, N * dt, times)
    D = rng.normal(size=(1, d))
    Om = np.array([[rng.uniform(0.1, 0.5)]])
    y = rng.normal(size=(len(times), 1))
    return dict(M=M, k=k, x0=x0, prob=prob, prior=prior, grid=grid, D=D, Om=Om, y=y,
                times=times, dt=dt, N=N)


def _oracle_meas(c):
    return [(n, c["D"], c["Om"], c["y"][i]) for i, n in enumerate(c["grid"].obs_index)]


def _oracle(c):
    return linear_ode_loglik(c["M"], c["k"], c["x0"], c["prior"].orders, c["prior"].scales,
                             c["dt"], c["N"], _oracle_meas(c))


@pytest.fixture(scope="module", params=[0, 1, 2])
def case(request):
    return linear_case(request.param)


def test_gaussian_engines_match_oracle(case):
    c = case
    ms = MeasurementSet(c["times"], c["y"], GaussianMeasurement(c["D"], c["Om"]))
    exact = _oracle(c)
    for fn in (dalton_gaussian_loglik, fenrir_loglik):
        got = fn(c["prob"], c["prior"], c["grid"], ms, [], linearization="full")
        assert got == pytest.approx(exact, rel=1e-8, abs=1e-8)


def test_nongaussian_with_quadratic_density_is_gaussian(case):
    c = case
    ms = MeasurementSet(c["times"], c["y"], quadratic_measurement(c["D"], c["Om"]))
    got = dalton_nongaussian_loglik(c["prob"], c["prior"], c["grid"], ms, [], linearization="full")
    assert got == pytest.approx(_oracle(c), rel=1e-8, abs=1e-8)


def test_datafree_matches_oracle(case):
    c = case
    joint, _ = linear_ode_joint(c["M"], c["k"], c["x0"], c["prior"].orders, c["prior"].scales,
                                c["dt"], c["N"])
    z = joint.index("Z")
    _, ll = datafree_filter(c["prob"], c["prior"], c["grid"], [], linearization="full")
    assert ll == pytest.approx(marginal_loglik(joint, z, np.zeros(len(z))), rel=1e-8, abs=1e-8)
    out = datafree_smooth(c["prob"], c["prior"], c["grid"], [], linearization="full")
    mean, cov = condition(joint, z, np.zeros(len(z)))
    x = joint.index("X")
    np.testing.assert_allclose(out.mean.ravel(), mean[x], atol=1e-8)
    np.testing.assert_allclose(out.cov[-1], cov[np.ix_(x, x)][-out.cov.shape[1]:, -out.cov.shape[1]:],
                               atol=1e-8)


def test_dalton_posterior_matches_oracle(case):
    c = case
    ms = MeasurementSet(c["times"], c["y"], GaussianMeasurement(c["D"], c["Om"]))
    joint, _ = linear_ode_joint(c["M"], c["k"], c["x0"], c["prior"].orders, c["prior"].scales,
                                c["dt"], c["N"], _oracle_meas(c))
    z, yi, x = joint.index("Z"), joint.index("Y"), joint.index("X")
    mean, _ = condition(joint, np.concatenate([z, yi]),
                        np.concatenate([np.zeros(len(z)), c["y"].ravel()]))
    out = solve("dalton", c["prob"], c["prior"], c["grid"], [], meas=ms, linearization="full")
    np.testing.assert_allclose(out.mean.ravel(), mean[x], atol=1e-7)


def test_blockwise_exact_for_decoupled_linear_model():
    model = get_model("linear")
    ms = simulate_data(model, seed=3)
    lam = model.true_theta[:2]
    x0 = model.true_theta[2:]
    prior = IbmPrior((3, 3), (1.0, 1.0))
    grid = build_grid(0.25, model.problem.horizon, ms.times)
    meas = [(n, np.eye(2), model.phi * np.eye(2), ms.values[i]) for i, n in enumerate(grid.obs_index)]
    exact = linear_ode_loglik(-np.diag(lam), np.zeros(2), x0, (3, 3), (1.0, 1.0), 0.25, grid.N, meas)
    got = dalton_gaussian_loglik(model.problem, prior, grid, ms, model.true_theta)
    assert got == pytest.approx(exact, rel=1e-8)


def test_empty_data_gives_zero():
    model = get_model("fn")
    ms = MeasurementSet.empty(model.measurement(model.phi))
    prior = IbmPrior((3, 3), (1.0, 1.0))
    grid = build_grid(0.1, model.problem.horizon)
    for engine in ("dalton", "dalton-ng", "fenrir"):
        assert evaluate(engine, model.problem, prior, grid, ms, model.true_theta) == 0.0


def test_engine_capabilities():
    model = get_model("seirah")
    ms = simulate_data(model, seed=0)
    prior = IbmPrior((3,) * 6, (1.0,) * 6)
    grid = build_grid(1.0, model.problem.horizon, ms.times)
    with pytest.raises(UnsupportedError):
        fenrir_loglik(model.problem, prior, grid, ms, model.true_theta)
    with pytest.raises(UnsupportedError):
        dalton_gaussian_loglik(model.problem, prior, grid, ms, model.true_theta)
    with pytest.raises(ConfigError):
        evaluate("rk", model.problem, prior, grid, ms, model.true_theta)
    with pytest.raises(UnsupportedError):
        solve("fenrir", model.problem, prior, grid, model.true_theta, meas=ms)


def test_poisson_dalton_is_finite_and_deterministic():
    model = get_model("seirah")
    ms = simulate_data(model, seed=0)
    prior = IbmPrior((3,) * 6, tuple(model.eta0) * (6 // len(model.eta0)))
    grid = build_grid(0.5, model.problem.horizon, ms.times)
    a = dalton_nongaussian_loglik(model.problem, prior, grid, ms, model.true_theta)
    b = dalton_nongaussian_loglik(model.problem, prior, grid, ms, model.true_theta)
    assert np.isfinite(a) and a == b


def test_poisson_factory_is_general():
    ms = MeasurementSet([0.0], [[1.0]], poisson_measurement(np.eye(1)))
    assert not ms.is_gaussian
