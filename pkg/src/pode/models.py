"""
Benchmark ODE models, a Runge-Kutta reference solver and a data simulator.

Vector fields are written once against an array namespace ``xp`` so that
the filters can trace them with ``jax.numpy`` while the Runge-Kutta baseline
calls the plain-numpy version.
"""

import math
from dataclasses import dataclass, field
from functools import lru_cache, partial
from types import SimpleNamespace
from typing import Callable, Optional

import jax.numpy as jnp
import numpy as np
from scipy.integrate import solve_ivp
from scipy.special import gammaln

from pode.errors import ConfigError, DivergedError
from pode.measurement import (
    MIN_INTENSITY,
    GaussianMeasurement,
    MeasurementSet,
    poisson_measurement,
)
from pode.ode import OdeProblem

RK_RTOL = 1e-10
RK_ATOL = 1e-12

# array namespace for the Runge-Kutta twins: plain floats beat numpy scalars
SCALAR = SimpleNamespace(stack=list, sin=math.sin)


@dataclass(frozen=True, eq=False)
class ModelDef:
    """A benchmark problem wired to its measurement model.

    ``measurement(phi)`` returns the measurement model, ``phi`` being the
    fixed noise variance (ignored for count data).  ``eta0`` are starting
    values for the prior scales and ``dt`` the default solver step.
    ``derivatives`` is the default differentiation mode for fits ("fd" for
    chaotic systems, see :class:`pode.inference.JaxObjective`).
    """

    name: str
    problem: OdeProblem
    true_theta: np.ndarray
    measurement: Callable
    obs_times: np.ndarray
    phi: Optional[float]
    eta0: np.ndarray
    dt: float
    counts: bool = False
    notes: dict = field(default_factory=dict)
    derivatives: str = "autodiff"

    def measurement_set(self, times, values, phi=None):
        phi = self.phi if phi is None else phi
        return MeasurementSet(times, values, self.measurement(phi))


def _gaussian(D, phi):
    D = np.atleast_2d(np.asarray(D, float))
    return GaussianMeasurement(D, phi * np.eye(D.shape[0]))


# --- FitzHugh-Nagumo -----------------------------------------------------------


def fn_field(x, t, theta, xp=jnp):
    a, b, c = theta[0], theta[1], theta[2]
    V, R = x[0], x[1]
    return xp.stack([c * (V - V**3 / 3 + R), -(V - a + b * R) / c])


def fn_jac(x, t, theta):
    a, b, c = theta[0], theta[1], theta[2]
    V = x[0]
    return jnp.array([[c * (1 - V**2), c], [-1 / c, -b / c]])


def fitzhugh_nagumo() -> ModelDef:
    problem = OdeProblem(
        orders=(1, 1),
        fun=fn_field,
        init=lambda th: th[3:5],
        horizon=40.0,
        jac=fn_jac,
        theta_names=("a", "b", "c", "V0", "R0"),
        positive=(True, True, True, False, False),
        var_names=("V", "R"),
        numpy_fun=partial(fn_field, xp=SCALAR),
    )
    return ModelDef(
        "fn", problem, np.array([0.2, 0.2, 3.0, -1.0, 1.0]),
        lru_cache()(lambda phi: _gaussian(np.eye(2), phi)),
        np.arange(41.0), 0.005, np.array([0.1, 0.1]), 0.025,
    )


# --- SEIRAH --------------------------------------------------------------------

SEIRAH_FIXED = {
    "S0": 63_884_630.0,
    "R0": 0.0,
    "A0": 618_013.0,
    "H0": 13_388.0,
    "D_I": 2.3,
    "D_h": 30.0,
}


def seirah_field(x, t, theta, xp=jnp):
    b, r, alpha, De, Dq = theta[0], theta[1], theta[2], theta[3], theta[4]
    DI, Dh = SEIRAH_FIXED["D_I"], SEIRAH_FIXED["D_h"]
    S, E, I, R, A, H = x[0], x[1], x[2], x[3], x[4], x[5]
    N = S + E + I + R + A + H
    inf = b * S * (I + alpha * A) / N
    return xp.stack([
        -inf,
        inf - E / De,
        r * E / De - I / Dq - I / DI,
        (I + A) / DI + H / Dh,
        (1 - r) * E / De - A / DI,
        I / Dq - H / Dh,
    ])


def seirah_init(theta):
    f = SEIRAH_FIXED
    return jnp.stack([
        jnp.asarray(f["S0"]), theta[5], theta[6],
        jnp.asarray(f["R0"]), jnp.asarray(f["A0"]), jnp.asarray(f["H0"]),
    ])


def seirah_obs_matrix(theta):
    """Maps the state to the Poisson intensities ``(r E / D_e, I / D_q)``."""
    r, De, Dq = theta[1], theta[3], theta[4]
    D = jnp.zeros((2, 6))
    return D.at[0, 1].set(r / De).at[1, 2].set(1.0 / Dq)


def seirah() -> ModelDef:
    problem = OdeProblem(
        orders=(1,) * 6,
        fun=seirah_field,
        init=seirah_init,
        horizon=60.0,
        theta_names=("b", "r", "alpha", "D_e", "D_q", "E0", "I0"),
        positive=(True,) * 7,
        jac=seirah_jac,
        var_names=("S", "E", "I", "R", "A", "H"),
        numpy_fun=partial(seirah_field, xp=SCALAR),
    )
    return ModelDef(
        "seirah", problem,
        np.array([2.23, 0.034, 0.55, 5.1, 1.13, 15_492.0, 21_752.0]),
        lru_cache()(lambda phi: poisson_measurement(seirah_obs_matrix)),
        np.arange(61.0), None, np.full(6, 1e4), 0.1, counts=True,
    )


def seirah_jac(x, t, theta):
    b, r, alpha, De, Dq = theta[0], theta[1], theta[2], theta[3], theta[4]
    DI, Dh = SEIRAH_FIXED["D_I"], SEIRAH_FIXED["D_h"]
    S, I, A = x[0], x[2], x[4]
    N = jnp.sum(x[:6])
    P = I + alpha * A
    # d(b S P / N)/dx; N depends on every compartment
    g = -b * S * P / N**2 * jnp.ones(6)
    g = g.at[0].add(b * P / N).at[2].add(b * S / N).at[4].add(b * alpha * S / N)
    e = jnp.eye(6)
    return jnp.stack([
        -g,
        g - e[1] / De,
        r * e[1] / De - e[2] * (1 / Dq + 1 / DI),
        (e[2] + e[4]) / DI + e[5] / Dh,
        (1 - r) * e[1] / De - e[4] / DI,
        e[2] / Dq - e[5] / Dh,
    ])


# --- pendulum ------------------------------------------------------------------

GRAVITY = 9.81


def pendulum_field(x, t, theta, xp=jnp):
    return xp.stack([-GRAVITY / theta[0] * xp.sin(x[0])])


def pendulum_jac(x, t, theta):
    return jnp.array([[-GRAVITY / theta[0] * jnp.cos(x[0]), 0.0]])


def pendulum() -> ModelDef:
    problem = OdeProblem(
        orders=(2,),
        fun=pendulum_field,
        init=lambda th: th[1:3],
        horizon=10.0,
        jac=pendulum_jac,
        theta_names=("L", "x0", "v0"),
        positive=(True, False, False),
        var_names=("x",),
        numpy_fun=partial(pendulum_field, xp=SCALAR),
    )
    return ModelDef(
        "pendulum", problem, np.array([1.0, 0.0, np.pi / 2]),
        lru_cache()(lambda phi: _gaussian([[0.0, 1.0]], phi)),
        np.arange(11.0), 0.1, np.array([1e4]), 0.01,
        notes={"theta0": (5.0, 0.0, np.pi / 2)},
    )


# --- Lorenz63 ------------------------------------------------------------------


def lorenz_field(x, t, theta, xp=jnp):
    rho, alpha, beta = theta[0], theta[1], theta[2]
    return xp.stack([
        alpha * (x[1] - x[0]),
        x[0] * (rho - x[2]) - x[1],
        x[0] * x[1] - beta * x[2],
    ])


def lorenz_jac(x, t, theta):
    rho, alpha, beta = theta[0], theta[1], theta[2]
    return jnp.array([
        [-alpha, alpha, 0.0],
        [rho - x[2], -1.0, -x[0]],
        [x[1], x[0], -beta],
    ])


LORENZ_X0 = (-12.0, -5.0, 38.0)


def lorenz63() -> ModelDef:
    problem = OdeProblem(
        orders=(1, 1, 1),
        fun=lorenz_field,
        init=lambda th: th[3:6],
        horizon=20.0,
        jac=lorenz_jac,
        theta_names=("rho", "alpha", "beta", "x0", "y0", "z0"),
        positive=(True, True, True, False, False, False),
        var_names=("x", "y", "z"),
        numpy_fun=partial(lorenz_field, xp=SCALAR),
    )
    return ModelDef(
        "lorenz63", problem, np.array([28.0, 10.0, 8.0 / 3.0, *LORENZ_X0]),
        lru_cache()(lambda phi: _gaussian(np.eye(3), phi)),
        np.arange(21.0), 0.005, np.full(3, 1e6), 0.005, derivatives="fd",
    )


def lorenz63_known_init() -> ModelDef:
    """Lorenz63 with the initial state fixed and observations every 0.1."""
    x0 = jnp.asarray(LORENZ_X0)
    problem = OdeProblem(
        orders=(1, 1, 1),
        fun=lorenz_field,
        init=lambda th: x0,
        horizon=20.0,
        jac=lorenz_jac,
        theta_names=("rho", "alpha", "beta"),
        positive=(True, True, True),
        var_names=("x", "y", "z"),
        numpy_fun=partial(lorenz_field, xp=SCALAR),
    )
    return ModelDef(
        "lorenz63-ic", problem, np.array([28.0, 10.0, 8.0 / 3.0]),
        lru_cache()(lambda phi: _gaussian(np.eye(3), phi)),
        np.round(np.arange(201) * 0.1, 10), 0.005, np.full(3, 1e5), 0.01, derivatives="fd",
    )


# --- linear test model ---------------------------------------------------------


def linear_field(x, t, theta, xp=jnp):
    return xp.stack([-theta[0] * x[0], -theta[1] * x[1]])


def linear_jac(x, t, theta):
    return jnp.array([[-theta[0], 0.0], [0.0, -theta[1]]])


def linear_decay() -> ModelDef:
    """Two independent exponential decays; exact under blockwise linearization."""
    problem = OdeProblem(
        orders=(1, 1),
        fun=linear_field,
        init=lambda th: th[2:4],
        horizon=2.0,
        jac=linear_jac,
        theta_names=("k1", "k2", "x1_0", "x2_0"),
        positive=(True, True, False, False),
        var_names=("x1", "x2"),
        numpy_fun=partial(linear_field, xp=SCALAR),
    )
    return ModelDef(
        "linear", problem, np.array([0.5, 1.5, 1.0, -2.0]),
        lru_cache()(lambda phi: _gaussian(np.eye(2), phi)),
        np.arange(5) * 0.5, 0.01, np.array([1.0, 1.0]), 0.25,
    )


_REGISTRY = {
    "fn": fitzhugh_nagumo,
    "seirah": seirah,
    "pendulum": pendulum,
    "lorenz63": lorenz63,
    "lorenz63-ic": lorenz63_known_init,
    "linear": linear_decay,
}
MODEL_NAMES = tuple(_REGISTRY)
_CACHE = {}


def get_model(name: str) -> ModelDef:
    """Look up a benchmark by name (instances are cached so compiled engines are reused)."""
    if name not in _REGISTRY:
        raise ConfigError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
    if name not in _CACHE:
        _CACHE[name] = _REGISTRY[name]()
    return _CACHE[name]


# --- Runge-Kutta reference -----------------------------------------------------


def _first_order_rhs(problem: OdeProblem, theta):
    """Natural-form right-hand side as a first-order system for ``solve_ivp``."""
    theta = np.asarray(theta, float)
    fun = problem.numpy_fun
    if fun is None:
        import jax

        jf = jax.jit(problem.fun)
        fun = lambda x, t, th: np.asarray(jf(x, t, th))  # noqa: E731
    orders = problem.orders
    top = np.cumsum(orders) - 1
    shift_src = np.array([i + 1 for i in range(sum(orders)) if i not in set(top)], dtype=int)
    shift_dst = shift_src - 1

    th = theta.tolist()

    def rhs(t, x):
        dx = np.empty_like(x)
        dx[shift_dst] = x[shift_src]
        dx[top] = fun(x.tolist(), t, th)
        return dx

    return rhs


def rk_solve(problem: OdeProblem, theta, times, rtol=RK_RTOL, atol=RK_ATOL) -> np.ndarray:
    """Reference solution of the natural state at ``times``, shape ``(len(times), sum(q))``.

    Uses an adaptive 8(5,3) Dormand-Prince pair landing exactly on each
    requested time.
    """
    times = np.asarray(times, float)
    theta = np.asarray(theta, float)
    x0 = np.asarray(problem.init(theta), float)
    if times.size == 0:
        return np.zeros((0, x0.size))
    t_end = max(float(times[-1]), 0.0)
    if t_end == 0.0:
        return np.tile(x0, (times.size, 1))
    with np.errstate(all="ignore"):
        sol = solve_ivp(_first_order_rhs(problem, theta), (0.0, t_end), x0, method="DOP853",
                        t_eval=times, rtol=rtol, atol=atol)
    if sol.status != 0 or sol.y.shape[1] != times.size or not np.all(np.isfinite(sol.y)):
        raise DivergedError(f"Runge-Kutta integration failed: {sol.message}")
    return sol.y.T


def _draw(model: ModelDef, mean, phi, rng):
    if model.counts:
        return rng.poisson(np.maximum(mean, 0.0)).astype(float)
    return mean + np.sqrt(phi) * rng.standard_normal(mean.shape)


def simulate_data(model: ModelDef, theta=None, phi=None, times=None, seed=0) -> MeasurementSet:
    """Observations of the Runge-Kutta solution under the model's noise.

    The generator is numpy's PCG64; observation ``i`` draws from the
    ``i``-th child of ``SeedSequence(seed)``, so every row depends only on
    ``(seed, i)`` and not on how many rows are generated.
    """
    theta = model.true_theta if theta is None else np.asarray(theta, float)
    phi = model.phi if phi is None else phi
    times = model.obs_times if times is None else np.asarray(times, float)
    meas = model.measurement(phi)
    x = rk_solve(model.problem, theta, times)
    D = np.asarray(meas.matrices(jnp.asarray(theta), len(times))[0] if not model.counts
                   else meas.matrices(jnp.asarray(theta), len(times)))
    means = np.einsum("ims,is->im", D, x)
    children = np.random.SeedSequence(seed).spawn(len(times))
    values = np.stack([_draw(model, means[i], phi, np.random.Generator(np.random.PCG64(s)))
                       for i, s in enumerate(children)]) if len(times) else np.zeros((0, D.shape[1]))
    return MeasurementSet(times, values, meas)


def rk_loglik(model: ModelDef, meas: MeasurementSet, theta) -> float:
    """Log-likelihood of the data given the (numerically exact) ODE solution."""
    if len(meas) == 0:
        return 0.0
    theta = np.asarray(theta, float)
    x = rk_solve(model.problem, theta, meas.times)
    mm = meas.model
    if isinstance(mm, GaussianMeasurement):
        D, cov = (np.asarray(a) for a in mm.matrices(jnp.asarray(theta), len(meas)))
        r = meas.values - np.einsum("ims,is->im", D, x)
        L = np.linalg.cholesky(cov)
        w = np.linalg.solve(L, r[..., None])[..., 0]
        logdet = 2 * np.sum(np.log(np.diagonal(L, axis1=1, axis2=2)), axis=1)
        m = r.shape[1]
        return float(-0.5 * np.sum(np.sum(w**2, axis=1) + logdet + m * np.log(2 * np.pi)))
    D = np.asarray(mm.matrices(jnp.asarray(theta), len(meas)))
    lam = np.einsum("ims,is->im", D, x)
    if mm.nll.__name__ == "poisson_nll":
        lam = np.maximum(lam, MIN_INTENSITY)
        y = meas.values
        return float(-np.sum(lam - y * np.log(lam) + gammaln(y + 1.0)))
    return float(-sum(float(mm.nll(y, l)) for y, l in zip(meas.values, lam)))
