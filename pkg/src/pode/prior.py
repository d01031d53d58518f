r"""
Integrated Brownian motion (IBM) priors for the solution process.

Each ODE variable :math:`x_k(t)` gets an independent :math:`(p_k-1)`-times
integrated Brownian motion, :math:`x_k^{(p_k-1)}(t) = \sigma_k B_k(t)`, so
that the block :math:`(x_k, \dot x_k, \ldots, x_k^{(p_k-1)})` is a
Gauss-Markov process with closed-form transition

.. math::

    Q_{ij} = 1\{i \le j\} \frac{\Delta t^{j-i}}{(j-i)!}, \qquad
    R_{ij} = \sigma^2 \frac{\Delta t^{2p-1-i-j}}{(2p-1-i-j)(p-1-i)!(p-1-j)!},

with zero-based indices :math:`i, j \in \{0, \ldots, p-1\}`.
"""

from dataclasses import dataclass
from math import factorial
from typing import NamedTuple, Sequence

import numpy as np

from pode.errors import InvalidPriorError


class TransitionParams(NamedTuple):
    r"""Affine-Gaussian transition :math:`X_{n+1} \mid X_n \sim N(Q X_n + c, R)`."""

    Q: np.ndarray
    c: np.ndarray
    R: np.ndarray


@dataclass(frozen=True)
class IbmPrior:
    r"""Per-variable IBM orders and scales.

    Parameters
    ----------
    orders : sequence of int
        Number of state slots :math:`p_k` for each ODE variable (the
        variable itself plus :math:`p_k - 1` derivatives).
    scales : sequence of float
        Diffusion scales :math:`\sigma_k`.
    """

    orders: tuple
    scales: tuple

    def __post_init__(self):
        orders = tuple(int(p) for p in self.orders)
        scales = tuple(float(s) for s in self.scales)
        if len(orders) != len(scales):
            raise InvalidPriorError("orders and scales must have the same length")
        if not orders:
            raise InvalidPriorError("prior needs at least one block")
        for p in orders:
            if p < 1:
                raise InvalidPriorError(f"IBM order must be >= 1, got {p}")
        for s in scales:
            if not s > 0:
                raise InvalidPriorError(f"IBM scale must be > 0, got {s}")
        object.__setattr__(self, "orders", orders)
        object.__setattr__(self, "scales", scales)

    @classmethod
    def uniform(cls, d: int, order: int, scale: float = 1.0) -> "IbmPrior":
        return cls((order,) * d, (scale,) * d)

    @property
    def n_blocks(self) -> int:
        return len(self.orders)

    @property
    def state_dim(self) -> int:
        return sum(self.orders)

    def with_scales(self, scales: Sequence[float]) -> "IbmPrior":
        return IbmPrior(self.orders, tuple(scales))


def _check(p, sigma, dt):
    if int(p) != p or p < 1:
        raise InvalidPriorError(f"IBM order must be a positive integer, got {p}")
    if not sigma > 0:
        raise InvalidPriorError(f"IBM scale must be > 0, got {sigma}")
    if not dt >= 0:
        raise InvalidPriorError(f"step size must be >= 0, got {dt}")


def ibm_unit(p: int, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """``(Q, R)`` for one IBM block with unit scale."""
    _check(p, 1.0, dt)
    p = int(p)
    Q = np.zeros((p, p))
    R = np.zeros((p, p))
    for i in range(p):
        for j in range(p):
            if i <= j:
                Q[i, j] = dt ** (j - i) / factorial(j - i)
            k = 2 * p - 1 - i - j
            R[i, j] = dt**k / (k * factorial(p - 1 - i) * factorial(p - 1 - j))
    return Q, R


def ibm_transition(p: int, sigma: float, dt: float) -> TransitionParams:
    """Transition parameters of a single :math:`(p-1)`-times IBM block.

    Examples
    --------
    >>> tp = ibm_transition(2, 1.0, 1.0)
    >>> tp.Q
    array([[1., 1.],
           [0., 1.]])
    >>> tp.R
    array([[0.33333333, 0.5       ],
           [0.5       , 1.        ]])
    """
    _check(p, sigma, dt)
    Q, R = ibm_unit(p, dt)
    return TransitionParams(Q, np.zeros(int(p)), sigma**2 * R)


def block_diag(*blocks) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    out = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        out[i : i + k, i : i + k] = b
        i += k
    return out


def assemble_prior(prior: IbmPrior, dt: float) -> TransitionParams:
    """Block-diagonal transition over all ODE variables."""
    parts = [ibm_transition(p, s, dt) for p, s in zip(prior.orders, prior.scales)]
    return TransitionParams(
        block_diag(*(tp.Q for tp in parts)),
        np.concatenate([tp.c for tp in parts]),
        block_diag(*(tp.R for tp in parts)),
    )


def unit_transition(orders: Sequence[int], dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Block-diagonal ``(Q, R)`` with all scales equal to one.

    The scaled process noise is ``R * np.outer(s, s)`` with ``s`` the per-slot
    scale vector from :func:`slot_scales`; this keeps the scales traceable
    when they are optimized.
    """
    parts = [ibm_unit(p, dt) for p in orders]
    return block_diag(*(q for q, _ in parts)), block_diag(*(r for _, r in parts))


def slot_scales(orders: Sequence[int], scales):
    """Repeat each block scale over its slots (works on numpy or jax arrays)."""
    idx = np.repeat(np.arange(len(orders)), orders)
    return scales[idx]
