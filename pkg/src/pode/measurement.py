r"""
Measurement models and observed data.

Observations :math:`Y_i` at times :math:`t'_i` depend on the natural ODE state
(the solution and, for higher-order problems, its lower derivatives) through
a linear map :math:`D_i`:

* :class:`GaussianMeasurement` -- :math:`Y_i \sim N(D_i x, \Omega_i)`.
* :class:`GeneralMeasurement` -- :math:`p(Y_i \mid x) = \exp\{-g(Y_i, D_i x)\}`.

``D`` may be an array of shape ``(m, s)`` or ``(M+1, m, s)``, or a callable
``D(theta)`` returning either, which lets observation scalings depend on ODE
parameters (e.g. reporting rates in compartment models).
"""

from dataclasses import dataclass
from typing import Callable, Optional, Union

import jax
import jax.numpy as jnp
import numpy as np
from jax.scipy.special import gammaln

from pode.errors import ConfigError

# intensities below this are clamped before taking logs
MIN_INTENSITY = 1e-10


def _resolve(D, theta):
    return jnp.asarray(D(theta) if callable(D) else D, dtype=float)


@dataclass(frozen=True, eq=False)
class GaussianMeasurement:
    r"""Linear-Gaussian observations :math:`Y_i \sim N(D_i x, \Omega_i)`."""

    D: Union[np.ndarray, Callable]
    cov: np.ndarray

    def matrices(self, theta, n_obs):
        D = _resolve(self.D, theta)
        cov = jnp.asarray(self.cov, dtype=float)
        D = jnp.broadcast_to(D, (n_obs,) + D.shape[-2:])
        cov = jnp.broadcast_to(cov, (n_obs,) + cov.shape[-2:])
        return D, cov

    def loglik(self, y, xobs, i=0):
        cov = jnp.asarray(self.cov, dtype=float)
        if cov.ndim == 3:
            cov = cov[i]
        L = jnp.linalg.cholesky(cov)
        w = jax.scipy.linalg.solve_triangular(L, y - xobs, lower=True)
        return -0.5 * (w @ w + 2.0 * jnp.sum(jnp.log(jnp.diag(L))) + y.shape[0] * jnp.log(2 * jnp.pi))


@dataclass(frozen=True, eq=False)
class GeneralMeasurement:
    """Observations with negative log-density ``nll(y, xobs)``.

    ``grad`` and ``hess`` default to automatic differentiation of ``nll`` in
    its second argument.
    """

    D: Union[np.ndarray, Callable]
    nll: Callable
    grad: Optional[Callable] = None
    hess: Optional[Callable] = None

    def matrices(self, theta, n_obs):
        D = _resolve(self.D, theta)
        return jnp.broadcast_to(D, (n_obs,) + D.shape[-2:])

    def gradient(self, y, xobs):
        if self.grad is not None:
            return self.grad(y, xobs)
        return jax.grad(self.nll, argnums=1)(y, xobs)

    def hessian(self, y, xobs):
        if self.hess is not None:
            return self.hess(y, xobs)
        return jax.hessian(self.nll, argnums=1)(y, xobs)

    def loglik(self, y, xobs, i=0):
        return -self.nll(y, xobs)


def poisson_nll(y, lam):
    """Independent Poisson counts; intensities are clamped at ``MIN_INTENSITY``."""
    lam = jnp.maximum(lam, MIN_INTENSITY)
    return jnp.sum(lam - y * jnp.log(lam) + gammaln(y + 1.0))


def poisson_grad(y, lam):
    lam = jnp.maximum(lam, MIN_INTENSITY)
    return 1.0 - y / lam


def poisson_hess(y, lam):
    lam = jnp.maximum(lam, MIN_INTENSITY)
    return jnp.diag(y / lam**2)


def poisson_measurement(D) -> GeneralMeasurement:
    return GeneralMeasurement(D, poisson_nll, poisson_grad, poisson_hess)


def quadratic_measurement(D, cov) -> GeneralMeasurement:
    """Gaussian observations written as a general negative log-density."""
    cov = np.asarray(cov, dtype=float)
    prec = np.linalg.inv(cov)
    _, logdet = np.linalg.slogdet(cov)
    m = cov.shape[0]

    def nll(y, x):
        r = y - x
        return 0.5 * (r @ prec @ r + logdet + m * np.log(2 * np.pi))

    return GeneralMeasurement(
        D, nll, lambda y, x: -prec @ (y - x), lambda y, x: jnp.asarray(prec)
    )


@dataclass(frozen=True, eq=False)
class MeasurementSet:
    """Observation times, values and the model linking them to the state.

    The measurement parameters (noise scales etc.) are fixed inside
    ``model``.
    """

    times: np.ndarray
    values: np.ndarray
    model: Union[GaussianMeasurement, GeneralMeasurement]

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values.reshape(len(times), -1) if len(times) else values.reshape(0, 0)
        if values.shape[0] != times.shape[0]:
            raise ConfigError("times and values have different lengths")
        if np.any(np.diff(times) <= 0):
            raise ConfigError("observation times must be strictly increasing")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "values", values)

    def __len__(self):
        return self.times.shape[0]

    @property
    def is_gaussian(self) -> bool:
        return isinstance(self.model, GaussianMeasurement)

    @classmethod
    def empty(cls, model) -> "MeasurementSet":
        return cls(np.zeros(0), np.zeros((0, 0)), model)
