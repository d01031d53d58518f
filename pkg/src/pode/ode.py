r"""
Parameterized ODE initial value problems of arbitrary order.

A problem is given in its natural form: for each variable :math:`k` of order
:math:`q_k`,

.. math::

    x_k^{(q_k)}(t) = f_k(\mathbf{x}(t), t, \theta),

where :math:`\mathbf{x}` stacks :math:`(x_k, \dot x_k, \ldots, x_k^{(q_k-1)})`
over all variables.  :func:`pad_to_prior_order` lifts it onto the state of
an IBM prior with :math:`p_k > q_k` slots per variable, giving the
constraint form :math:`W X = f(X, t)` used by the filters.

Vector fields must be written with ``jax.numpy`` (they are traced).
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple, Optional, Sequence

import jax
import jax.numpy as jnp
import numpy as np

from pode.errors import ConfigError, GridError
from pode.kalman import GaussianState


@dataclass(frozen=True, eq=False)
class OdeProblem:
    """An ODE-IVP in natural form.

    Parameters
    ----------
    orders : tuple of int
        Differential order :math:`q_k` of each variable.
    fun : callable
        ``fun(x, t, theta) -> array(d)`` returning the highest derivatives.
    init : callable
        ``init(theta) -> array(sum(orders))``, the initial value of the
        stacked lower-order state.
    horizon : float
        Final time :math:`T`.
    jac : callable, optional
        ``jac(x, t, theta) -> array(d, sum(orders))``.  Falls back to
        forward-mode autodiff of ``fun`` when omitted.
    theta_names, positive, var_names : tuple
        Parameter names, positivity flags and variable names.
    numpy_fun : callable, optional
        Twin of ``fun`` for the Runge-Kutta baseline, called with lists of
        floats (per-call overhead dominates there).
    """

    orders: tuple
    fun: Callable
    init: Callable
    horizon: float
    jac: Optional[Callable] = None
    theta_names: tuple = ()
    positive: tuple = ()
    var_names: tuple = ()
    numpy_fun: Optional[Callable] = None

    def __post_init__(self):
        object.__setattr__(self, "orders", tuple(int(q) for q in self.orders))
        if any(q < 1 for q in self.orders):
            raise ConfigError("ODE orders must be >= 1")

    @property
    def d(self) -> int:
        return len(self.orders)

    @property
    def state_dim(self) -> int:
        return sum(self.orders)

    def jacobian(self, x, t, theta):
        if self.jac is not None:
            return self.jac(x, t, theta)
        return jax.jacfwd(self.fun)(x, t, theta)


class Linearization(NamedTuple):
    r"""Working model :math:`Z_n \sim N((W + B_n) X_n + a_n, V_n)`."""

    a: jnp.ndarray
    B: jnp.ndarray
    V: jnp.ndarray


@dataclass(frozen=True, eq=False)
class PaddedProblem:
    """An :class:`OdeProblem` lifted onto the prior state.

    Attributes
    ----------
    W : ndarray (d, n_state)
        Selects slot :math:`q_k` of each block.
    lift : ndarray (n_state, sum(q))
        Zero-one map embedding the natural state into the padded state;
        ``lift.T @ X`` extracts the natural state.
    block_mask : ndarray (d, n_state)
        One on the columns belonging to each row's own variable.
    """

    problem: OdeProblem
    slots: tuple
    W: np.ndarray
    lift: np.ndarray
    block_mask: np.ndarray
    solution_index: np.ndarray = field(repr=False)

    @property
    def state_dim(self) -> int:
        return sum(self.slots)

    @property
    def d(self) -> int:
        return self.problem.d

    def natural(self, X):
        return self.lift.T @ X

    def fun(self, X, t, theta):
        return self.problem.fun(self.lift.T @ X, t, theta)

    def jac(self, X, t, theta):
        return self.problem.jacobian(self.lift.T @ X, t, theta) @ self.lift.T

    def initial(self, theta):
        r"""Initial padded state :math:`v_\theta`.

        Lower-order slots come from the IVP, slot :math:`q_k` from the vector
        field at :math:`t = 0`, higher slots are zero.
        """
        x0 = jnp.asarray(self.problem.init(theta), dtype=float)
        fx0 = jnp.asarray(self.problem.fun(x0, 0.0, theta), dtype=float)
        return self.lift @ x0 + self.W.T @ fx0

    def lift_measurement(self, D):
        """Map a matrix acting on the natural state to the padded state."""
        return D @ self.lift.T


def _build_padding(problem: OdeProblem, slots: tuple) -> PaddedProblem:
    q = problem.orders
    n = sum(slots)
    W = np.zeros((problem.d, n))
    lift = np.zeros((n, sum(q)))
    mask = np.zeros((problem.d, n))
    sol = np.zeros(problem.d, dtype=int)
    start = 0
    nat = 0
    for k, (qk, pk) in enumerate(zip(q, slots)):
        W[k, start + qk] = 1.0
        for j in range(qk):
            lift[start + j, nat + j] = 1.0
        mask[k, start : start + pk] = 1.0
        sol[k] = start
        start += pk
        nat += qk
    return PaddedProblem(problem, slots, W, lift, mask, sol)


@lru_cache(maxsize=128)
def _cached_padding(problem, slots):
    return _build_padding(problem, slots)


def pad_to_prior_order(problem: OdeProblem, slots: Sequence[int]) -> PaddedProblem:
    """Lift ``problem`` onto a prior with ``slots[k]`` state slots per variable.

    Each variable needs at least :math:`q_k + 1` slots so that its highest
    derivative is part of the state.  Results are cached per problem object.
    """
    slots = tuple(int(p) for p in slots)
    if len(slots) != problem.d:
        raise ConfigError(f"prior has {len(slots)} blocks, problem has {problem.d} variables")
    for k, (qk, pk) in enumerate(zip(problem.orders, slots)):
        if pk < qk + 1:
            raise ConfigError(
                f"variable {k}: prior has {pk} slots, needs at least {qk + 1} for order {qk}"
            )
    return _cached_padding(problem, slots)


def default_slots(problem: OdeProblem) -> tuple:
    """One slot beyond the highest ODE derivative for every variable."""
    return tuple(q + 2 for q in problem.orders)


def linearize_zeroth(pred: GaussianState, padded: PaddedProblem, t, theta) -> Linearization:
    """Zeroth-order Taylor linearization at the predictive mean."""
    fx = padded.fun(pred.mean, t, theta)
    d, n = padded.W.shape
    return Linearization(-fx, jnp.zeros((d, n)), jnp.zeros((d, d)))


def linearize_first(pred: GaussianState, padded: PaddedProblem, t, theta,
                    blockwise: bool = True) -> Linearization:
    r"""First-order linearization at the predictive mean.

    With ``blockwise=True`` the Jacobian is masked to its block-diagonal
    part (each equation keeps only the columns of its own variable).  Since
    the residual is :math:`W X - f(X)`, the working operator is
    :math:`W + B_n` with :math:`B_n = -J_n` and :math:`a_n = -f(\mu) + J_n\mu`.
    """
    mu = pred.mean
    fx = padded.fun(mu, t, theta)
    J = padded.jac(mu, t, theta)
    if blockwise:
        J = J * padded.block_mask
    d = padded.W.shape[0]
    return Linearization(-fx + J @ mu, -J, jnp.zeros((d, d)))


LINEARIZATIONS = ("blockwise", "full", "zeroth")


def linearize(pred, padded, t, theta, method="blockwise") -> Linearization:
    if method == "blockwise":
        return linearize_first(pred, padded, t, theta, blockwise=True)
    if method == "full":
        return linearize_first(pred, padded, t, theta, blockwise=False)
    if method == "zeroth":
        return linearize_zeroth(pred, padded, t, theta)
    raise ConfigError(f"unknown linearization {method!r}; choose from {LINEARIZATIONS}")


@dataclass(frozen=True)
class GridMap:
    r"""Solver grid :math:`t_n = n \Delta t` and observation map :math:`i \mapsto n(i)`."""

    dt: float
    N: int
    obs_index: tuple

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.N + 1)

    def step_of(self, i: int) -> int:
        return self.obs_index[i]

    def obs_of(self, n: int) -> int:
        r"""Inverse map :math:`i(n) = \max\{i: n(i) \le n\}` (``-1`` if none)."""
        return int(np.searchsorted(self.obs_index, n, side="right")) - 1


def build_grid(dt: float, T: float, obs_times=()) -> GridMap:
    """Map observation times onto the grid ``0, dt, ..., N dt`` with ``N = round(T/dt)``.

    Raises
    ------
    GridError
        If an observation time is not within ``1e-9 * dt`` of a grid point
        or falls outside ``[0, N dt]``.
    """
    if not dt > 0:
        raise GridError(f"step size must be positive, got {dt}")
    if not T > 0:
        raise GridError(f"horizon must be positive, got {T}")
    N = int(round(T / dt))
    if N < 0:
        raise GridError("empty grid")
    obs_times = np.asarray(obs_times, dtype=float).reshape(-1)
    idx = []
    for t in obs_times:
        n = int(round(t / dt))
        if abs(n * dt - t) > 1e-9 * dt:
            raise GridError(f"observation time {t} is not on the grid with dt={dt}")
        if n < 0 or n > N:
            raise GridError(f"observation time {t} is outside [0, {N * dt}]")
        idx.append(n)
    if any(b <= a for a, b in zip(idx, idx[1:])):
        raise GridError("observation times must be strictly increasing")
    return GridMap(float(dt), N, tuple(idx))
