import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pode.errors import SingularMatrixError
from pode.kalman import (
    GaussianState,
    ObservationParams,
    backward_kernel,
    forecast,
    mvn_logpdf,
    predict,
    smooth,
    update,
)
from pode.oracle import build_joint, condition, gaussian_logpdf


def _spd(rng, k, floor=0.1):
    A = rng.standard_normal((k, k))
    return A @ A.T + floor * np.eye(k)


def random_chain(seed, N=None, nx=None):
    """Random linear-Gaussian chain with observations at every step."""
    rng = np.random.default_rng(seed)
    N = N or int(rng.integers(1, 6))
    nx = nx or int(rng.integers(1, 5))
    m0 = rng.standard_normal(nx)
    P0 = _spd(rng, nx)
    trans = [(rng.standard_normal((nx, nx)) / np.sqrt(nx), rng.standard_normal(nx), _spd(rng, nx))
             for _ in range(N)]
    obs = []
    for _ in range(N + 1):
        k = int(rng.integers(1, nx + 1))
        obs.append((rng.standard_normal((k, nx)), rng.standard_normal(k), _spd(rng, k)))
    z = [rng.standard_normal(len(o[1])) for o in obs]
    return m0, P0, trans, obs, z


def run_filter(m0, P0, trans, obs, z):
    state = GaussianState(jnp.asarray(m0), jnp.asarray(P0))
    preds, filts, fcs = [], [], []
    for n, o in enumerate(obs):
        if n > 0:
            Q, c, R = trans[n - 1]
            state = predict(state, (jnp.asarray(Q), jnp.asarray(c), jnp.asarray(R)))
        preds.append(state)
        op = ObservationParams(*(jnp.asarray(v) for v in o))
        fcs.append(forecast(state, op))
        state = update(state, jnp.asarray(z[n]), op)
        filts.append(state)
    sm = [filts[-1]]
    for n in range(len(obs) - 2, -1, -1):
        sm.insert(0, smooth(sm[0], filts[n], preds[n + 1], jnp.asarray(trans[n][0])))
    return preds, filts, fcs, sm


def _close(a, b, tol=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    scale = max(1.0, np.abs(b).max())
    np.testing.assert_allclose(a, b, rtol=0, atol=tol * scale)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_filter_smoother_match_joint_conditioning(seed):
    m0, P0, trans, obs, z = random_chain(seed)
    joint = build_joint(m0, P0, trans, obs)
    preds, filts, fcs, sm = run_filter(m0, P0, trans, obs, z)
    N = len(trans)
    for n in range(N + 1):
        past = joint.index("Z", range(n))
        past_val = np.concatenate(z[:n]) if n else np.zeros(0)
        x = joint.index("X", [n])
        zn = joint.index("Z", [n])
        mean, cov = condition(joint, past, past_val)
        _close(fcs[n].mean, mean[zn])
        _close(fcs[n].cov, cov[np.ix_(zn, zn)])
        upto = joint.index("Z", range(n + 1))
        mean, cov = condition(joint, upto, np.concatenate(z[: n + 1]))
        _close(filts[n].mean, mean[x])
        _close(filts[n].cov, cov[np.ix_(x, x)])
    allz = joint.index("Z")
    mean, cov = condition(joint, allz, np.concatenate(z))
    for n in range(N + 1):
        x = joint.index("X", [n])
        _close(sm[n].mean, mean[x])
        _close(sm[n].cov, cov[np.ix_(x, x)])


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_prediction_error_decomposition(seed):
    m0, P0, trans, obs, z = random_chain(seed)
    joint = build_joint(m0, P0, trans, obs)
    _, _, fcs, _ = run_filter(m0, P0, trans, obs, z)
    total = sum(float(mvn_logpdf(jnp.asarray(z[n]), fcs[n])) for n in range(len(obs)))
    m, S = joint.marginal(joint.index("Z"))
    exact = gaussian_logpdf(np.concatenate(z), m, S)
    assert total == pytest.approx(exact, rel=1e-8, abs=1e-8)


def test_backward_kernel_is_the_conditional():
    m0, P0, trans, obs, z = random_chain(3, N=2, nx=3)
    joint = build_joint(m0, P0, trans, obs)
    preds, filts, _, _ = run_filter(m0, P0, trans, obs, z)
    A, b, C = backward_kernel(filts[0], preds[1], jnp.asarray(trans[0][0]))
    x1 = np.array([0.3, -1.0, 2.0])
    idx = np.concatenate([joint.index("Z", [0]), joint.index("X", [1])])
    mean, cov = condition(joint, idx, np.concatenate([z[0], x1]))
    x0 = joint.index("X", [0])
    _close(A @ x1 + b, mean[x0])
    _close(C, cov[np.ix_(x0, x0)])


def test_mvn_logpdf_matches_scipy():
    from scipy.stats import multivariate_normal

    rng = np.random.default_rng(0)
    S = _spd(rng, 3)
    m = rng.standard_normal(3)
    x = rng.standard_normal(3)
    got = float(mvn_logpdf(jnp.asarray(x), GaussianState(jnp.asarray(m), jnp.asarray(S))))
    assert got == pytest.approx(multivariate_normal(m, S).logpdf(x), rel=1e-12)


def test_constrained_density_is_density_on_subspace():
    # X = (U, U) with U ~ N(0, 1): the density on the line x1 = x2, in arc length
    cov = jnp.ones((2, 2))
    H = jnp.array([[1.0, -1.0]])
    x = jnp.array([0.7, 0.7])
    got = float(mvn_logpdf(x, GaussianState(jnp.zeros(2), cov), constraint=H))
    # arc-length coordinate s = sqrt(2) u has variance 2
    s = np.sqrt(2) * 0.7
    assert got == pytest.approx(-0.5 * (np.log(2 * np.pi * 2) + s**2 / 2), rel=1e-12)


def test_eager_singular_update_raises():
    state = GaussianState(jnp.zeros(2), jnp.zeros((2, 2)))
    op = ObservationParams(jnp.eye(2), jnp.zeros(2), jnp.zeros((2, 2)))
    with pytest.raises(SingularMatrixError):
        update(state, jnp.ones(2), op)
