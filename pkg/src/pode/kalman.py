r"""
Kalman recursions for the linear-Gaussian state-space model

.. math::

    X_n = Q_n X_{n-1} + c_n + R_n^{1/2} \epsilon_n, \qquad
    Z_n = W_n X_n + a_n + V_n^{1/2} \eta_n.

All functions are pure ``jax.numpy`` code so they can be traced inside
``jax.jit``/``lax.scan``.  When called eagerly they raise
:class:`~pode.errors.SingularMatrixError` instead of returning NaNs.
"""

from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import jax.scipy.linalg as jsl
from jax import lax

from pode.errors import SingularMatrixError

LOG_2PI = 1.8378770664093453

# relative jitter added once when a Cholesky factorization fails
JITTER = 1e-10
# eigenvalue floor for degenerate covariances in mvn_logpdf
EIG_FLOOR = 1e-12


class GaussianState(NamedTuple):
    mean: jnp.ndarray
    cov: jnp.ndarray


class ObservationParams(NamedTuple):
    W: jnp.ndarray
    a: jnp.ndarray
    V: jnp.ndarray


def symmetrize(A):
    return 0.5 * (A + A.T)


def _is_concrete(*xs):
    return not any(isinstance(x, jax.core.Tracer) for x in xs)


def _ensure_finite(what, *xs):
    if _is_concrete(*xs):
        for x in xs:
            if not bool(jnp.all(jnp.isfinite(x))):
                raise SingularMatrixError(f"{what}: matrix is numerically singular")


def cholesky(S):
    """Lower Cholesky factor, retrying once with a small diagonal jitter.

    Returns NaNs (traced) or raises (eager) if the jittered matrix still
    fails to factorize.
    """
    L = jnp.linalg.cholesky(S)

    def retry(_):
        k = S.shape[0]
        jit = JITTER * jnp.abs(jnp.trace(S)) / k
        return jnp.linalg.cholesky(S + jit * jnp.eye(k))

    if _is_concrete(L):
        # eager: a Python branch avoids tracing lax.cond on every call
        if not bool(jnp.all(jnp.isfinite(L))):
            L = retry(None)
    else:
        L = lax.cond(jnp.all(jnp.isfinite(L)), lambda _: L, retry, None)
    _ensure_finite("cholesky", L)
    return L


def _cho_solve(L, B):
    return jsl.cho_solve((L, True), B)


def predict(state: GaussianState, trans) -> GaussianState:
    r"""Propagate through :math:`X' = Q X + c + R^{1/2}\epsilon`."""
    Q, c, R = trans
    mean = Q @ state.mean + c
    cov = symmetrize(Q @ state.cov @ Q.T + R)
    return GaussianState(mean, cov)


def forecast(state: GaussianState, obs: ObservationParams) -> GaussianState:
    r"""Predictive distribution of :math:`Z = W X + a + V^{1/2}\eta`."""
    W, a, V = obs
    return GaussianState(W @ state.mean + a, symmetrize(W @ state.cov @ W.T + V))


def update(state: GaussianState, z, obs: ObservationParams) -> GaussianState:
    """Condition the state on an observation ``z``."""
    W, a, V = obs
    mu, Sigma = state
    WS = W @ Sigma
    L = cholesky(symmetrize(WS @ W.T + V))
    # gain transposed: A' = S^{-1} W Sigma
    At = _cho_solve(L, WS)
    mean = mu + At.T @ (z - W @ mu - a)
    cov = symmetrize(Sigma - At.T @ WS)
    return GaussianState(mean, cov)


def _backward_gain(filtered, predicted, Q):
    L = cholesky(predicted.cov)
    # A = Sigma_{n|n} Q' Sigma_{n+1|n}^{-1}
    return _cho_solve(L, Q @ filtered.cov).T


def smooth(next_smoothed: GaussianState, filtered: GaussianState,
           predicted: GaussianState, Q) -> GaussianState:
    r"""One Rauch-Tung-Striebel step from :math:`n+1` back to :math:`n`.

    ``predicted`` is :math:`p(X_{n+1} \mid Z_{0:n})`.
    """
    A = _backward_gain(filtered, predicted, Q)
    mean = filtered.mean + A @ (next_smoothed.mean - predicted.mean)
    cov = symmetrize(filtered.cov + A @ (next_smoothed.cov - predicted.cov) @ A.T)
    return GaussianState(mean, cov)


def backward_kernel(filtered: GaussianState, predicted: GaussianState, Q):
    r"""Coefficients of :math:`X_n \mid X_{n+1} \sim N(A X_{n+1} + b, C)`."""
    A = _backward_gain(filtered, predicted, Q)
    b = filtered.mean - A @ predicted.mean
    C = symmetrize(filtered.cov - A @ Q @ filtered.cov)
    return A, b, C


def condition_on_next(x_next, filtered: GaussianState, predicted: GaussianState,
                      Q) -> GaussianState:
    """Distribution of :math:`X_n` given :math:`X_{n+1} = x` and :math:`Z_{0:n}`."""
    A, b, C = backward_kernel(filtered, predicted, Q)
    return GaussianState(A @ x_next + b, C)


def _logdet_quad(L, delta):
    w = jsl.solve_triangular(L, delta, lower=True)
    return 2.0 * jnp.sum(jnp.log(jnp.diag(L))), w @ w


def mvn_logpdf(x, state: GaussianState, constraint: Optional[jnp.ndarray] = None):
    r"""Multivariate normal log-density.

    Parameters
    ----------
    x : array
        Evaluation point.
    state : GaussianState
        Mean and covariance.
    constraint : array, optional
        Matrix ``H`` whose rows span a known null space of ``state.cov``
        (e.g. exact ODE constraints with zero noise).  The density is then
        taken on the orthogonal complement of the row space of ``H``, i.e.
        w.r.t. Lebesgue measure on that subspace.

    Notes
    -----
    Without ``constraint``, a covariance that fails to factorize has its
    eigenvalues floored at ``EIG_FLOOR * (1 + trace)``.
    """
    delta = x - state.mean
    cov = state.cov
    k = cov.shape[0]
    if constraint is not None:
        H = constraint
        HHt = H @ H.T
        Lh = jnp.linalg.cholesky(HHt)
        G = _cho_solve(Lh, H)  # (HH')^{-1} H
        proj = H.T @ G
        L = jnp.linalg.cholesky(symmetrize(cov + proj))
        logdet, quad = _logdet_quad(L, delta)
        quad = quad - delta @ proj @ delta
        out = -0.5 * ((k - H.shape[0]) * LOG_2PI + logdet + quad)
    else:
        L = jnp.linalg.cholesky(cov)

        def floored(_):
            w, U = jnp.linalg.eigh(cov)
            w = jnp.maximum(w, EIG_FLOOR * (1.0 + jnp.abs(jnp.trace(cov))))
            return jnp.linalg.cholesky(symmetrize((U * w) @ U.T))

        if _is_concrete(L):
            if not bool(jnp.all(jnp.isfinite(L))):
                L = floored(None)
        else:
            L = lax.cond(jnp.all(jnp.isfinite(L)), lambda _: L, floored, None)
        logdet, quad = _logdet_quad(L, delta)
        out = -0.5 * (k * LOG_2PI + logdet + quad)
    _ensure_finite("mvn_logpdf", out)
    return out
