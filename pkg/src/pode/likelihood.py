r"""
Probabilistic ODE solution and likelihood engines.

All engines share one forward pass: predict with the IBM prior, linearize
the ODE residual at the predictive mean, and condition on the pseudo
observation :math:`Z_n = 0`, optionally stacked with data at observation
steps.

* :func:`datafree_filter` / :func:`datafree_smooth` -- solution posterior
  :math:`p(X_{0:N} \mid Z_{0:N} = 0)` and :math:`\log p(Z_{1:N} = 0)`.
* :func:`dalton_gaussian_loglik` -- :math:`\log p(Y \mid Z = 0)` as the
  difference of two filter log-densities, the numerator pass observing the
  data *before* linearizing.
* :func:`dalton_nongaussian_loglik` -- general measurement densities via a
  path plug-in identity with Gaussianized pseudo-observations.
* :func:`fenrir_loglik` -- data-free linearization followed by a Kalman
  filter on the backward Markov representation of the solution posterior.

Each engine is compiled once per ``(problem, prior orders, grid, data,
linearization)`` and is differentiable in ``theta`` and the prior scales.
"""

import copy
from functools import lru_cache
from typing import NamedTuple, Optional

import jax
import jax.numpy as jnp
import numpy as np
from jax import lax

from pode.errors import ConfigError, DivergedError, SingularMatrixError, UnsupportedError
from pode.kalman import (
    GaussianState,
    ObservationParams,
    backward_kernel,
    cholesky,
    condition_on_next,
    forecast,
    mvn_logpdf,
    predict,
    smooth,
    symmetrize,
)
from pode.measurement import MIN_INTENSITY, GaussianMeasurement, MeasurementSet
from pode.ode import GridMap, OdeProblem, PaddedProblem, linearize, pad_to_prior_order
from pode.prior import IbmPrior, TransitionParams, slot_scales, unit_transition

ENGINES = ("datafree", "dalton", "dalton-ng", "fenrir")


def _ridge(g2):
    k = g2.shape[0]
    eps = 1e-8 * (1.0 + jnp.trace(g2) / k)
    return g2 + eps * jnp.eye(k)


class SolverOutput(NamedTuple):
    """Smoothed solution on the grid (padded state) plus the log-likelihood."""

    times: np.ndarray
    mean: np.ndarray
    cov: np.ndarray
    loglik: float
    padded: PaddedProblem
    diagnostics: dict

    def solution(self):
        """Means of the natural ODE state, shape ``(N+1, sum(q))``."""
        return self.mean @ self.padded.lift

    def solution_sd(self):
        var = np.einsum("ij,nik,kj->nj", self.padded.lift, self.cov, self.padded.lift)
        return np.sqrt(np.maximum(var, 0.0))


class _Setup:
    """Static pieces of an engine (everything that does not depend on parameters)."""

    def __init__(self, padded: PaddedProblem, grid: GridMap, meas: Optional[MeasurementSet],
                 method: str):
        self.padded = padded
        self.grid = grid
        self.meas = meas
        self.method = method
        N = grid.N
        self.Q, self.R = unit_transition(padded.slots, grid.dt)
        self.times = grid.dt * np.arange(1, N + 1)
        has = np.zeros(N + 1, dtype=bool)
        oidx = np.zeros(N + 1, dtype=int)
        if meas is not None:
            if len(grid.obs_index) != len(meas):
                raise ConfigError("grid was built for a different set of observation times")
            for i, n in enumerate(grid.obs_index):
                has[n] = True
                oidx[n] = i
            self.values = jnp.asarray(meas.values)
        self.has = has
        self.oidx = oidx

    def transition(self, sigma):
        s = slot_scales(self.padded.slots, sigma)
        n = self.padded.state_dim
        return TransitionParams(jnp.asarray(self.Q), jnp.zeros(n), self.R * jnp.outer(s, s))

    def lifted_D(self, theta):
        D = self.meas.model.matrices(theta, len(self.meas))
        if isinstance(D, tuple):
            D, cov = D
        else:
            cov = None
        return jnp.einsum("ims,sn->imn", D, self.padded.lift.T), cov


def _stack_obs(H, a, z, D, y, Vy):
    d, m = H.shape[0], D.shape[0]
    W = jnp.concatenate([H, D])
    off = jnp.concatenate([a, jnp.zeros(m)])
    V = jnp.zeros((d + m, d + m)).at[d:, d:].set(Vy)
    return ObservationParams(W, off, V), jnp.concatenate([z, y])


def _forecast_update(pred, z, obs):
    fc = forecast(pred, obs)
    ll = mvn_logpdf(z, fc)
    # reuse the forecast covariance for the gain
    L = cholesky(fc.cov)
    WS = obs.W @ pred.cov
    At = jax.scipy.linalg.cho_solve((L, True), WS)
    mean = pred.mean + At.T @ (z - fc.mean)
    cov = symmetrize(pred.cov - At.T @ WS)
    return ll, GaussianState(mean, cov)


def _forward(setup: _Setup, theta, sigma, observe=None):
    """Forward filter over ``n = 1..N``.

    ``observe(pred, i, zobs)`` returns ``(D, y, V)`` to stack onto the ODE
    pseudo-observation ``zobs`` at data steps; ``None`` runs the data-free
    filter.
    Returns the initial state, stacked predicted/filtered states, the
    constraint rows ``W + B_n``, per-step log-densities and finiteness flags.
    """
    padded = setup.padded
    trans = setup.transition(sigma)
    n_state = padded.state_dim
    d = padded.d
    x0 = GaussianState(padded.initial(theta), jnp.zeros((n_state, n_state)))
    z0 = jnp.zeros(d)
    W = jnp.asarray(padded.W)

    def step(state, xs):
        t, has, i = xs
        pred = predict(state, trans)
        lin = linearize(pred, padded, t, theta, setup.method)
        H = W + lin.B
        zobs = ObservationParams(H, lin.a, lin.V)
        if observe is None:
            ll, filt = _forecast_update(pred, z0, zobs)
        else:
            def with_data(_):
                D, y, Vy = observe(pred, i, zobs)
                obs, z = _stack_obs(H, lin.a, z0, D, y, Vy)
                return _forecast_update(pred, z, obs)

            def without_data(_):
                return _forecast_update(pred, z0, zobs)

            ll, filt = lax.cond(has, with_data, without_data, None)
        f_ok = jnp.all(jnp.isfinite(lin.a)) & jnp.all(jnp.isfinite(H))
        return filt, (pred, filt, H, ll, f_ok)

    xs = (jnp.asarray(setup.times), jnp.asarray(setup.has[1:]), jnp.asarray(setup.oidx[1:]))
    _, (pred, filt, Hs, lls, f_ok) = lax.scan(step, x0, xs)
    return x0, pred, filt, Hs, lls, f_ok


def _with_initial(x0, filt):
    return GaussianState(
        jnp.concatenate([x0.mean[None], filt.mean]),
        jnp.concatenate([x0.cov[None], filt.cov]),
    )


def _failure(filt, f_ok):
    """Index of the first bad step (``-1`` if none) and whether the vector field caused it."""
    ok = (
        f_ok
        & jnp.all(jnp.isfinite(filt.mean), axis=-1)
        & jnp.all(jnp.isfinite(filt.cov), axis=(-1, -2))
    )
    bad = ~ok
    first = jnp.where(jnp.any(bad), jnp.argmax(bad) + 1, -1)
    f_bad = jnp.where(jnp.any(bad), ~f_ok[jnp.argmax(bad)], False)
    return first, f_bad


def _rts(filt_all, pred, Q):
    """Smoothed marginals for ``n = 0..N`` from filtered (``0..N``) and predicted (``1..N``)."""
    N = pred.mean.shape[0]
    last = GaussianState(filt_all.mean[N], filt_all.cov[N])

    def step(nxt, xs):
        f_mean, f_cov, p_mean, p_cov = xs
        sm = smooth(nxt, GaussianState(f_mean, f_cov), GaussianState(p_mean, p_cov), Q)
        return sm, sm

    xs = (filt_all.mean[:N], filt_all.cov[:N], pred.mean, pred.cov)
    _, out = lax.scan(step, last, xs, reverse=True)
    return GaussianState(
        jnp.concatenate([out.mean, last.mean[None]]),
        jnp.concatenate([out.cov, last.cov[None]]),
    )


def _path_logdens(path, filt_all, pred, Hs, Q):
    r"""Log-density of ``path[1:]`` under the backward chain of a filter pass.

    Uses :math:`p(X_N) \prod_{n=1}^{N-1} p(X_n \mid X_{n+1})`, each factor
    taken on the complement of the exact ODE constraint rows at that step.
    """
    N = pred.mean.shape[0]
    last = GaussianState(filt_all.mean[N], filt_all.cov[N])
    ll = mvn_logpdf(path[N], last, constraint=Hs[N - 1])
    if N == 1:
        return ll

    def term(x_n, x_next, f_mean, f_cov, p_mean, p_cov, H):
        cond = condition_on_next(x_next, GaussianState(f_mean, f_cov),
                                 GaussianState(p_mean, p_cov), Q)
        return mvn_logpdf(x_n, cond, constraint=H)

    terms = jax.vmap(term)(
        path[1:N], path[2 : N + 1],
        filt_all.mean[1:N], filt_all.cov[1:N],
        pred.mean[1:N], pred.cov[1:N],
        Hs[: N - 1],
    )
    return ll + jnp.sum(terms)


# --- engine bodies (traceable) -------------------------------------------------


def _datafree_body(setup, theta, sigma):
    x0, pred, filt, Hs, lls, f_ok = _forward(setup, theta, sigma)
    first, f_bad = _failure(filt, f_ok)
    return jnp.sum(lls), {"first_bad": first, "f_bad": f_bad}


def _dalton_body(setup, theta, sigma):
    _, _, filt_z, _, ll_z, ok_z = _forward(setup, theta, sigma)
    D, cov = setup.lifted_D(theta)
    Y = setup.values

    def observe(pred, i, zobs):
        return D[i], Y[i], cov[i]

    x0, _, filt_yz, _, ll_yz, ok_yz = _forward(setup, theta, sigma, observe)
    seed = 0.0
    if setup.has[0]:
        i0 = setup.oidx[0]
        fc = forecast(x0, ObservationParams(D[i0], jnp.zeros(D.shape[1]), cov[i0]))
        seed = mvn_logpdf(Y[i0], fc)
    first_z, bad_z = _failure(filt_z, ok_z)
    first_yz, bad_yz = _failure(filt_yz, ok_yz)
    value = seed + jnp.sum(ll_yz) - jnp.sum(ll_z)
    first = jnp.where(first_z >= 0, first_z, first_yz)
    return value, {"first_bad": first, "f_bad": bad_z | bad_yz}


def _pseudo_observer(model, D, Y):
    r"""Gaussianized data for the non-Gaussian forward pass.

    The negative log-density is expanded to second order around the
    observed slots of the predictive mean after conditioning on the step's
    ODE pseudo-observation (the raw prediction extrapolates and can leave
    the support of the density, e.g. negative Poisson intensities).
    """

    def observe(pred, i, zobs):
        fc = forecast(pred, zobs)
        L = cholesky(fc.cov)
        gain_t = jax.scipy.linalg.cho_solve((L, True), zobs.W @ pred.cov)
        mean = pred.mean - gain_t.T @ fc.mean
        xo = D[i] @ mean
        g1 = model.gradient(Y[i], xo)
        g2 = _ridge(symmetrize(model.hessian(Y[i], xo)))
        Lg = jnp.linalg.cholesky(g2)
        Vy = jax.scipy.linalg.cho_solve((Lg, True), jnp.eye(g2.shape[0]))
        return D[i], xo - Vy @ g1, symmetrize(Vy)

    return observe


def _dalton_ng_body(setup, theta, sigma):
    model = setup.meas.model
    D, _ = setup.lifted_D(theta)
    Y = setup.values
    observe = _pseudo_observer(model, D, Y)
    Q = jnp.asarray(setup.Q)
    if setup.grid.N == 0:
        x0 = setup.padded.initial(theta)
        xobs = D[0] @ x0
        return -model.nll(Y[0], xobs), {"first_bad": jnp.asarray(-1),
                                        "f_bad": jnp.asarray(False),
                                        "clamps": jnp.sum(xobs < MIN_INTENSITY)}
    # pass 1: pseudo-observations, smoothed mean path and its density
    x0, pred1, filt1, H1, _, ok1 = _forward(setup, theta, sigma, observe)
    filt1_all = _with_initial(x0, filt1)
    smoothed = _rts(filt1_all, pred1, Q)
    path = smoothed.mean.at[0].set(x0.mean)
    ll_xyz = _path_logdens(path, filt1_all, pred1, H1, Q)
    # pass 2: data-free chain evaluated at the same path
    _, pred2, filt2, H2, _, ok2 = _forward(setup, theta, sigma)
    ll_xz = _path_logdens(path, _with_initial(x0, filt2), pred2, H2, Q)
    # measurement density along the path
    steps = jnp.asarray(setup.grid.obs_index)
    xobs = jnp.einsum("imn,in->im", D, path[steps])
    ll_y = -jnp.sum(jax.vmap(model.nll)(Y, xobs))
    clamps = jnp.sum(xobs < MIN_INTENSITY)
    first1, bad1 = _failure(filt1, ok1)
    first2, bad2 = _failure(filt2, ok2)
    value = ll_xz + ll_y - ll_xyz
    first = jnp.where(first2 >= 0, first2, first1)
    return value, {"first_bad": first, "f_bad": bad1 | bad2, "clamps": clamps}


def _fenrir_body(setup, theta, sigma):
    Q = jnp.asarray(setup.Q)
    x0, pred, filt, _, _, ok = _forward(setup, theta, sigma)
    filt_all = _with_initial(x0, filt)
    N = setup.grid.N
    A, b, C = jax.vmap(
        lambda fm, fc, pm, pc: backward_kernel(GaussianState(fm, fc), GaussianState(pm, pc), Q)
    )(filt_all.mean[:N], filt_all.cov[:N], pred.mean, pred.cov)
    D, cov = setup.lifted_D(theta)
    Y = setup.values
    m = D.shape[1]

    def observe(state, i):
        obs = ObservationParams(D[i], jnp.zeros(m), cov[i])
        return _forecast_update(state, Y[i], obs)

    state = GaussianState(filt_all.mean[N], filt_all.cov[N])
    ll = 0.0
    if setup.has[N]:
        ll, state = observe(state, setup.oidx[N])

    def step(carry, xs):
        state, ll = carry
        A_n, b_n, C_n, has, i = xs
        state = predict(state, TransitionParams(A_n, b_n, C_n))
        inc, state = lax.cond(has, lambda _: observe(state, i), lambda _: (0.0, state), None)
        return (state, ll + inc), None

    xs = (A, b, C, jnp.asarray(setup.has[:N]), jnp.asarray(setup.oidx[:N]))
    (_, ll), _ = lax.scan(step, (state, ll), xs, reverse=True)
    first, f_bad = _failure(filt, ok)
    return ll, {"first_bad": first, "f_bad": f_bad}


_BODIES = {
    "datafree": _datafree_body,
    "dalton": _dalton_body,
    "dalton-ng": _dalton_ng_body,
    "fenrir": _fenrir_body,
}


def _empty_body(setup, theta, sigma):
    return jnp.asarray(0.0), {"first_bad": jnp.asarray(-1), "f_bad": jnp.asarray(False)}


def _check_engine(engine, meas):
    if engine not in _BODIES:
        raise ConfigError(f"unknown engine {engine!r}; choose from {ENGINES}")
    if engine == "datafree":
        return
    if meas is None:
        raise ConfigError(f"engine {engine!r} needs measurements")
    if engine in ("dalton", "fenrir") and not isinstance(meas.model, GaussianMeasurement):
        raise UnsupportedError(f"engine {engine!r} supports Gaussian measurements only")


def loglik_function(engine: str, problem: OdeProblem, slots, grid: GridMap,
                    meas: Optional[MeasurementSet] = None, linearization: str = "blockwise"):
    """Traceable ``fn(theta, sigma, values=None) -> (loglik, aux)`` for one engine.

    ``values`` replaces the observed values of ``meas`` (same shape), so one
    compiled function serves every dataset sharing times and measurement
    model.  ``aux["first_bad"]`` is the first grid step with non-finite
    values (``-1`` if none).  The function is not jitted; wrap it as needed.
    """
    _check_engine(engine, meas)
    padded = pad_to_prior_order(problem, slots)
    if engine != "datafree" and len(meas) == 0:
        setup = None
        body = _empty_body
    else:
        setup = _Setup(padded, grid, None if engine == "datafree" else meas, linearization)
        body = _BODIES[engine]
        if grid.N == 0 and engine == "datafree":
            body = _empty_body

    def fn(theta, sigma, values=None):
        theta = jnp.asarray(theta, dtype=float)
        sigma = jnp.asarray(sigma, dtype=float)
        s = setup
        if values is not None and setup is not None and setup.meas is not None:
            s = copy.copy(setup)
            s.values = jnp.asarray(values, dtype=float)
        return body(s, theta, sigma)

    return fn


@lru_cache(maxsize=64)
def _jitted(engine, problem, slots, grid, meas, linearization):
    return jax.jit(loglik_function(engine, problem, slots, grid, meas, linearization))


def raise_on_failure(value, aux):
    first = int(aux["first_bad"])
    if first >= 0:
        if bool(aux["f_bad"]):
            raise DivergedError(f"vector field became non-finite at step {first}", step=first)
        raise SingularMatrixError(f"filter failed at step {first}")
    if not np.isfinite(float(value)):
        raise SingularMatrixError("non-finite log-likelihood")


def _scales(prior: IbmPrior, eta):
    return np.asarray(prior.scales if eta is None else eta, dtype=float)


def evaluate(engine: str, problem: OdeProblem, prior: IbmPrior, grid: GridMap,
             meas: Optional[MeasurementSet], theta, eta=None,
             linearization: str = "blockwise") -> float:
    """Evaluate an engine by name; raises on numerical failure."""
    _check_engine(engine, meas)
    if engine != "datafree" and len(meas) == 0:
        return 0.0
    if engine == "datafree" and grid.N == 0:
        return 0.0
    fn = _jitted(engine, problem, prior.orders, grid, meas, linearization)
    value, aux = fn(np.asarray(theta, dtype=float), _scales(prior, eta))
    raise_on_failure(value, aux)
    return float(value)


def dalton_gaussian_loglik(problem, prior, grid, meas, theta, eta=None,
                           linearization="blockwise") -> float:
    r"""DALTON approximation of :math:`\log p(Y_{0:M} \mid Z_{0:N} = 0, \theta, \eta)`."""
    return evaluate("dalton", problem, prior, grid, meas, theta, eta, linearization)


def dalton_nongaussian_loglik(problem, prior, grid, meas, theta, eta=None,
                              linearization="blockwise") -> float:
    """DALTON for general measurement densities (any :class:`MeasurementSet`)."""
    return evaluate("dalton-ng", problem, prior, grid, meas, theta, eta, linearization)


def fenrir_loglik(problem, prior, grid, meas, theta, eta=None,
                  linearization="blockwise") -> float:
    """Fenrir marginal likelihood; Gaussian measurements only."""
    return evaluate("fenrir", problem, prior, grid, meas, theta, eta, linearization)


# --- solution posteriors -------------------------------------------------------


@lru_cache(maxsize=32)
def _jitted_filter(problem, slots, grid, linearization):
    setup = _Setup(pad_to_prior_order(problem, slots), grid, None, linearization)

    def run(theta, sigma):
        x0, pred, filt, _, lls, ok = _forward(setup, theta, sigma)
        first, f_bad = _failure(filt, ok)
        return x0, pred, filt, jnp.sum(lls), {"first_bad": first, "f_bad": f_bad}

    return setup, jax.jit(run)


def datafree_filter(problem, prior, grid, theta, eta=None, linearization="blockwise"):
    r"""Forward data-free filter.

    Returns
    -------
    filtered : GaussianState
        Stacked filtered means ``(N+1, n)`` and covariances ``(N+1, n, n)``.
    loglik : float
        :math:`\log p(Z_{1:N} = 0)`; ``Z_0`` carries no information since the
        initial state is known exactly.
    """
    theta = np.asarray(theta, dtype=float)
    sigma = _scales(prior, eta)
    padded = pad_to_prior_order(problem, prior.orders)
    if grid.N == 0:
        x0 = padded.initial(theta)
        n = padded.state_dim
        return GaussianState(np.asarray(x0)[None], np.zeros((1, n, n))), 0.0
    _, run = _jitted_filter(problem, prior.orders, grid, linearization)
    x0, _, filt, ll, aux = run(theta, sigma)
    raise_on_failure(ll, aux)
    filt_all = _with_initial(x0, filt)
    return GaussianState(np.asarray(filt_all.mean), np.asarray(filt_all.cov)), float(ll)


@lru_cache(maxsize=32)
def _jitted_smoother(engine, problem, slots, grid, meas, linearization):
    setup = _Setup(pad_to_prior_order(problem, slots), grid,
                   None if engine == "datafree" else meas, linearization)
    Q = jnp.asarray(setup.Q)

    def run(theta, sigma):
        observe = None
        if engine == "dalton":
            D, cov = setup.lifted_D(theta)
            observe = lambda pred, i, zobs: (D[i], setup.values[i], cov[i])  # noqa: E731
        elif engine == "dalton-ng":
            D, _ = setup.lifted_D(theta)
            observe = _pseudo_observer(setup.meas.model, D, setup.values)

        x0, pred, filt, _, lls, ok = _forward(setup, theta, sigma, observe)
        filt_all = _with_initial(x0, filt)
        sm = _rts(filt_all, pred, Q)
        first, f_bad = _failure(filt, ok)
        return sm, jnp.sum(lls), {"first_bad": first, "f_bad": f_bad}

    return setup, jax.jit(run)


def solve(engine, problem, prior, grid, theta, eta=None, meas=None,
          linearization="blockwise") -> SolverOutput:
    """Smoothed solution posterior.

    ``engine="datafree"`` conditions on the ODE only; ``"dalton"`` and
    ``"dalton-ng"`` also condition on the data in the forward pass.
    ``loglik`` is the forward-pass log-density (of ``Z`` alone for the
    data-free engine, of the stacked ``Z`` and data otherwise).
    """
    if engine not in ("datafree", "dalton", "dalton-ng"):
        raise UnsupportedError(f"engine {engine!r} does not produce a solution posterior")
    if engine != "datafree":
        _check_engine(engine, meas)
        if len(meas) == 0:
            engine = "datafree"
            meas = None
    theta = np.asarray(theta, dtype=float)
    sigma = _scales(prior, eta)
    padded = pad_to_prior_order(problem, prior.orders)
    if grid.N == 0:
        n = padded.state_dim
        x0 = np.asarray(padded.initial(theta))[None]
        return SolverOutput(np.zeros(1), x0, np.zeros((1, n, n)), 0.0, padded, {})
    setup, run = _jitted_smoother(engine, problem, prior.orders, grid,
                                  None if engine == "datafree" else meas, linearization)
    sm, ll, aux = run(theta, sigma)
    raise_on_failure(ll, aux)
    return SolverOutput(grid.times, np.asarray(sm.mean), np.asarray(sm.cov), float(ll),
                        padded, {"engine": engine, "linearization": linearization})


def datafree_smooth(problem, prior, grid, theta, eta=None, linearization="blockwise"):
    """Data-free probabilistic ODE solution (RTS-smoothed)."""
    return solve("datafree", problem, prior, grid, theta, eta, None, linearization)
