r"""
Laplace-approximation parameter inference.

Parameters are optimized on a working scale: positive quantities (flagged in
:class:`ParamSpec`) through their logarithm, the rest unchanged.  The ODE
parameters :math:`\theta` get independent :math:`N(0, 10^2)` priors on the
working scale, the prior scales :math:`\eta` (always log-transformed) a flat
prior.  The posterior mode is found jointly in :math:`(\theta, \eta)`; the
reported covariance is the inverse negative Hessian in :math:`\theta` alone,
at the joint mode.

Likelihoods written in JAX are differentiated exactly; anything else (e.g.
the Runge-Kutta baseline) goes through :func:`gradient`/:func:`hessian`,
central finite differences.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import jax
import jax.numpy as jnp
import numpy as np

from pode.errors import HessianError, NoConvergenceError, NonFiniteError, PodeError

log = logging.getLogger(__name__)

PRIOR_SD = 10.0
GRAD_RTOL = 1e-5
MAX_ITER = 500
ETA_RANGE = 10.0
_EPS3 = np.cbrt(np.finfo(float).eps)


@dataclass(frozen=True)
class ParamSpec:
    r"""Names, transforms, priors and starting values of :math:`(\theta, \eta)`.

    With ``eta_shared`` the prior scales move together,
    :math:`\eta = \eta_0 e^{s}`, and a single working coordinate ``s``
    is optimized; otherwise each :math:`\log \eta_k` is free.  Log-scales
    further than ``eta_range`` from their starting values are infeasible
    (the flat prior lives on a box).
    """

    names: tuple
    positive: tuple
    init: np.ndarray
    eta_init: np.ndarray = field(default_factory=lambda: np.zeros(0))
    prior_sd: float = PRIOR_SD
    eta_shared: bool = True
    eta_range: float = ETA_RANGE

    def __post_init__(self):
        init = np.asarray(self.init, float).reshape(-1)
        eta = np.asarray(self.eta_init, float).reshape(-1)
        object.__setattr__(self, "init", init)
        object.__setattr__(self, "eta_init", eta)
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "positive", tuple(bool(p) for p in self.positive))
        if len(set(self.names)) != len(self.names):
            raise PodeError("parameter names must be unique")
        if not (len(self.names) == len(self.positive) == init.size):
            raise PodeError("names, positivity flags and initial values differ in length")
        pos = np.asarray(self.positive, bool)
        if np.any(init[pos] <= 0) or np.any(eta <= 0):
            raise PodeError("positive parameters need positive initial values")

    @classmethod
    def for_problem(cls, problem, theta0, eta0=(), **kwargs):
        positive = problem.positive or (False,) * len(theta0)
        names = problem.theta_names or tuple(f"theta{i}" for i in range(len(theta0)))
        return cls(names, positive, theta0, eta0, **kwargs)

    @property
    def n_theta(self) -> int:
        return len(self.names)

    @property
    def n_eta(self) -> int:
        """Number of working coordinates for the prior scales."""
        if self.eta_init.size == 0:
            return 0
        return 1 if self.eta_shared else self.eta_init.size

    def to_working(self, theta, eta=None):
        theta = np.asarray(theta, float)
        eta = self.eta_init if eta is None else np.asarray(eta, float)
        w = np.where(self.positive, np.log(np.where(self.positive, theta, 1.0)), theta)
        if self.n_eta == 0:
            return w
        le = np.log(eta) - np.log(self.eta_init)
        return np.concatenate([w, [np.mean(le)] if self.eta_shared else le])

    def from_working(self, w, xp=np):
        """``(theta, eta)`` on the natural scale; ``xp=jnp`` keeps it traceable."""
        wt = w[: self.n_theta]
        theta = xp.where(xp.asarray(self.positive), xp.exp(wt), wt)
        return theta, xp.asarray(self.eta_init) * xp.exp(w[self.n_theta:])

    def in_bounds(self, w) -> bool:
        return bool(np.all(np.abs(np.asarray(w)[self.n_theta:]) <= self.eta_range))

    def log_prior(self, w, xp=np):
        wt = w[: self.n_theta]
        s = self.prior_sd
        return xp.sum(-0.5 * (wt / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi))


# --- finite differences --------------------------------------------------------


def _steps(at):
    return _EPS3 * (1.0 + np.abs(at))


def gradient(fn: Callable, at, executor=None, steps=None) -> np.ndarray:
    """Central-difference gradient with steps ``cbrt(eps) * (1 + |x_r|)``.

    A coordinate whose stencil hits a non-finite value has its step halved,
    at most four times, before :class:`NonFiniteError` is raised.
    """
    at = np.asarray(at, float)
    h0 = _steps(at) if steps is None else np.asarray(steps, float)
    out = np.empty_like(at)
    mapper = executor.map if executor is not None else map

    def pair(r, h):
        e = np.zeros_like(at)
        e[r] = h
        return at + e, at - e

    todo = list(range(at.size))
    h = h0.copy()
    for _ in range(5):
        points = [p for r in todo for p in pair(r, h[r])]
        vals = list(mapper(fn, points))
        retry = []
        for j, r in enumerate(todo):
            fp, fm = vals[2 * j], vals[2 * j + 1]
            if np.isfinite(fp) and np.isfinite(fm):
                out[r] = (fp - fm) / (2 * h[r])
            else:
                retry.append(r)
                h[r] *= 0.5
        todo = retry
        if not todo:
            return out
    raise NonFiniteError(f"non-finite function values around coordinates {todo}")


def hessian(fn: Callable, at, grad: Optional[Callable] = None, executor=None) -> np.ndarray:
    """Central differences of the gradient, symmetrized.

    ``grad`` defaults to :func:`gradient` of ``fn``.
    """
    at = np.asarray(at, float)
    if grad is None:
        grad = lambda x: gradient(fn, x, executor)  # noqa: E731
    h = _steps(at)
    H = np.empty((at.size, at.size))
    for r in range(at.size):
        for k in range(5):
            e = np.zeros_like(at)
            e[r] = h[r]
            try:
                gp, gm = grad(at + e), grad(at - e)
            except NonFiniteError:
                gp = gm = np.full(at.size, np.nan)
            if np.all(np.isfinite(gp)) and np.all(np.isfinite(gm)):
                break
            h[r] *= 0.5
        else:
            raise NonFiniteError(f"non-finite gradient around coordinate {r}")
        H[r] = (gp - gm) / (2 * h[r])
    return 0.5 * (H + H.T)


# --- objectives ----------------------------------------------------------------


class Objective:
    """Log-posterior on the working scale.

    Subclasses provide :meth:`logpost`, :meth:`value_and_grad` and
    :meth:`hessian_theta`.  Engine failures become ``-inf`` (infeasible).
    """

    def __init__(self, spec: ParamSpec):
        self.spec = spec
        self.n_evals = 0
        self.failures = 0

    def logpost(self, w) -> float:  # pragma: no cover - interface
        raise NotImplementedError

    def value_and_grad(self, w):
        return self._fd_value_and_grad(w)

    def _fd_value_and_grad(self, w, executor=None):
        v = self.logpost(w)
        try:
            g = gradient(self.logpost, w, executor) if np.isfinite(v) else None
        except NonFiniteError:
            # a point next to a diverged region is treated as infeasible
            g = None
        if g is None:
            return -np.inf, np.full(np.size(w), np.nan)
        return v, g

    def hessian_full(self, w):
        return hessian(self.logpost, w, grad=lambda x: self.value_and_grad(x)[1])

    def hessian_theta(self, w):
        k = self.spec.n_theta
        rest = np.asarray(w[k:], float)

        def f(wt):
            return self.logpost(np.concatenate([wt, rest]))

        return hessian(f, np.asarray(w[:k], float))


class CallableObjective(Objective):
    """Wraps ``loglik(theta, eta) -> float``; derivatives by finite differences."""

    def __init__(self, loglik: Callable, spec: ParamSpec, executor=None):
        super().__init__(spec)
        self.loglik = loglik
        self.executor = executor

    def logpost(self, w) -> float:
        w = np.asarray(w, float)
        self.n_evals += 1
        if not np.all(np.isfinite(w)):
            return -np.inf
        if not self.spec.in_bounds(w):
            return -np.inf
        theta, eta = self.spec.from_working(w)
        try:
            with np.errstate(all="ignore"):
                ll = float(self.loglik(theta, eta))
        except (PodeError, ArithmeticError, np.linalg.LinAlgError) as exc:
            self.failures += 1
            log.debug("infeasible point %s: %s", theta, exc)
            return -np.inf
        if not np.isfinite(ll):
            self.failures += 1
            return -np.inf
        return ll + float(self.spec.log_prior(w))

    def value_and_grad(self, w):
        return self._fd_value_and_grad(w, self.executor)


_COMPILED = {}


def _spec_key(spec: ParamSpec):
    return (spec.names, spec.positive, tuple(spec.eta_init), spec.eta_shared,
            spec.prior_sd, spec.eta_range)


class JaxObjective(Objective):
    r"""Wraps a traceable ``fn(theta, sigma, data) -> (loglik, aux)``; exact derivatives.

    ``data`` (an array, or ``None``) is passed through unchanged, so
    objectives created with the same ``cache_key`` and parameter layout
    share compiled functions even when their data differ.

    ``derivatives="fd"`` swaps the autodiff gradient and Hessian for central
    differences of the compiled value.  For chaotic systems the exact
    derivative of the data-free pass grows like :math:`e^{\lambda T}` while
    its value barely moves, so differences on the working-scale step are
    the more useful slope.
    """

    def __init__(self, fn: Callable, spec: ParamSpec, cache_key=None, data=None,
                 derivatives="autodiff"):
        super().__init__(spec)
        if derivatives not in ("autodiff", "fd"):
            raise PodeError(f"unknown derivatives mode {derivatives!r}")
        self.derivatives = derivatives
        self._k = spec.n_theta
        self._data = None if data is None else jnp.asarray(data, dtype=float)
        key = None if cache_key is None else (cache_key, _spec_key(spec))
        if key is not None and key in _COMPILED:
            self._fns = _COMPILED[key]
            return

        def lp(w, data):
            theta, eta = spec.from_working(w, jnp)
            ll, aux = fn(theta, eta, data)
            bad = aux["first_bad"] >= 0
            return ll + spec.log_prior(w, jnp), bad

        # jit is lazy: nothing compiles until first use
        self._fns = {
            "v": jax.jit(lp),
            "vg": jax.jit(jax.value_and_grad(lp, has_aux=True)),
            "h": jax.jit(jax.hessian(lambda w, data: lp(w, data)[0])),
        }
        if key is not None:
            _COMPILED[key] = self._fns

    def logpost(self, w) -> float:
        self.n_evals += 1
        w = np.asarray(w, float)
        if not np.all(np.isfinite(w)) or not self.spec.in_bounds(w):
            return -np.inf
        v, bad = self._fns["v"](w, self._data)
        v = float(v)
        if bool(bad) or not np.isfinite(v):
            self.failures += 1
            return -np.inf
        return v

    def value_and_grad(self, w):
        if self.derivatives == "fd":
            return super().value_and_grad(w)
        self.n_evals += 1
        w = np.asarray(w, float)
        if not np.all(np.isfinite(w)) or not self.spec.in_bounds(w):
            return -np.inf, np.full(w.size, np.nan)
        (v, bad), g = self._fns["vg"](w, self._data)
        v, g = float(v), np.asarray(g)
        if bool(bad) or not np.isfinite(v) or not np.all(np.isfinite(g)):
            self.failures += 1
            return -np.inf, np.full(w.size, np.nan)
        return v, g

    def hessian_full(self, w):
        if self.derivatives == "fd":
            return super().hessian_full(w)
        H = np.asarray(self._fns["h"](np.asarray(w, float), self._data))
        return 0.5 * (H + H.T)

    def hessian_theta(self, w):
        if self.derivatives == "fd":
            return super().hessian_theta(w)
        return self.hessian_full(w)[: self._k, : self._k]


def log_posterior(objective: Objective, w) -> float:
    """Log-prior plus log-likelihood at working parameters ``w`` (``-inf`` if infeasible)."""
    return objective.logpost(w)


# --- optimizer -----------------------------------------------------------------


@dataclass
class OptimizeResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool
    message: str


def _line_search(f_and_g, x, fx, gx, p, alpha, max_tries=40, f=None):
    """Backtracking Armijo search with safeguarded quadratic/cubic interpolation.

    Minimizes; infeasible trial points (non-finite value) halve the step.
    With ``f`` (value only) trial points skip the gradient, which is then
    computed once at the accepted point.
    """
    slope = gx @ p
    a_prev = f_prev = None
    for _ in range(max_tries):
        xn = x + alpha * p
        if np.array_equal(xn, x):
            return None
        if f is None:
            fn, gn = f_and_g(xn)
        else:
            fn, gn = f(xn), None
        if not np.isfinite(fn):
            a_prev, f_prev = None, None
            alpha *= 0.5
            continue
        if fn <= fx + 1e-4 * alpha * slope:
            if gn is None:
                fn2, gn = f_and_g(xn)
                if not np.isfinite(fn2):
                    a_prev, f_prev = None, None
                    alpha *= 0.5
                    continue
            return alpha, xn, fn, gn
        if a_prev is None:
            a_new = -slope * alpha**2 / (2 * (fn - fx - slope * alpha))
        else:
            # cubic through the last two trial points
            r1 = fn - fx - alpha * slope
            r2 = f_prev - fx - a_prev * slope
            a = (r1 / alpha**2 - r2 / a_prev**2) / (alpha - a_prev)
            b = (-a_prev * r1 / alpha**2 + alpha * r2 / a_prev**2) / (alpha - a_prev)
            if a == 0:
                a_new = -slope / (2 * b)
            else:
                disc = max(b * b - 3 * a * slope, 0.0)
                a_new = (-b + np.sqrt(disc)) / (3 * a)
        a_prev, f_prev = alpha, fn
        if not np.isfinite(a_new):
            a_new = 0.5 * alpha
        alpha = float(np.clip(a_new, 0.1 * alpha, 0.5 * alpha))
    return None


def _newton_direction(H, g):
    """Newton step with eigenvalues replaced by their magnitudes (floored)."""
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        return None
    lam, U = np.linalg.eigh(H)
    floor = 1e-8 * max(np.max(np.abs(lam)), 1e-300)
    lam = np.maximum(np.abs(lam), floor)
    return -U @ ((U.T @ g) / lam)


def minimize(f_and_g: Callable, x0, tol_fn: Callable, max_iter=MAX_ITER, hess=None,
             max_step=None, f=None) -> OptimizeResult:
    """BFGS (or Newton with ``hess``) minimization.

    ``tol_fn(f, g)`` decides convergence.  ``max_step`` caps the first trial
    step in infinity norm.  ``f``, a value-only twin of ``f_and_g``, makes
    line-search trials cheap when gradients are finite differences.
    """
    x = np.asarray(x0, float)
    fx, gx = f_and_g(x)
    if not np.isfinite(fx):
        raise NonFiniteError("objective is not finite at the starting point")
    n = x.size
    Hinv = np.eye(n)
    fresh = True
    it = 0
    message = "maximum iterations reached"
    for it in range(1, max_iter + 1):
        if tol_fn(fx, gx):
            return OptimizeResult(x, fx, gx, it - 1, True, "converged")
        p = None
        if hess is not None:
            try:
                p = _newton_direction(hess(x), gx)
            except (PodeError, np.linalg.LinAlgError):
                p = None
        if p is None:
            p = -Hinv @ gx
            if gx @ p >= 0:
                Hinv = np.eye(n)
                fresh = True
                p = -gx
        alpha = 1.0
        if max_step is not None:
            alpha = min(1.0, max_step / max(np.max(np.abs(p)), 1e-300))
        elif fresh and hess is None:
            alpha = min(1.0, 1.0 / max(np.max(np.abs(gx)), 1e-300))
        found = _line_search(f_and_g, x, fx, gx, p, alpha, f=f)
        if found is None:
            if not fresh:
                Hinv = np.eye(n)
                fresh = True
                continue
            message = "line search failed"
            break
        _, xn, fn, gn = found
        log.debug("iter %d  f=%.10g  |g|=%.3g  x=%s", it, fn, np.max(np.abs(gn)), xn)
        s = xn - x
        y = gn - gx
        sy = s @ y
        if sy > 1e-10 * np.linalg.norm(s) * np.linalg.norm(y):
            if fresh:
                Hinv = np.eye(n) * (sy / (y @ y))
            rho = 1.0 / sy
            V = np.eye(n) - rho * np.outer(s, y)
            Hinv = V @ Hinv @ V.T + rho * np.outer(s, s)
            fresh = False
        x, fx, gx = xn, fn, gn
    else:
        it = max_iter
    converged = bool(tol_fn(fx, gx))
    return OptimizeResult(x, fx, gx, it, converged, "converged" if converged else message)


# --- Laplace -------------------------------------------------------------------


@dataclass
class LaplaceResult:
    """Posterior mode and the Laplace covariance of the ODE parameters.

    ``cov`` and ``sd`` are on the working scale (log for positive
    parameters); ``theta_sd`` maps them to the natural scale by the delta
    method.
    """

    names: tuple
    theta_hat: np.ndarray
    eta_hat: np.ndarray
    w_hat: np.ndarray
    cov: np.ndarray
    logpost: float
    grad_norm: float
    iterations: int
    converged: bool
    diagnostics: dict = field(default_factory=dict)

    @property
    def sd(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov))

    @property
    def theta_sd(self) -> np.ndarray:
        k = len(self.names)
        scale = np.where(self.diagnostics.get("positive", (False,) * k), self.theta_hat, 1.0)
        return self.sd * np.abs(scale)

    def covers(self, theta, n_sd=3.0, spec: Optional[ParamSpec] = None) -> np.ndarray:
        """Whether each true value lies within ``n_sd`` working-scale sds of the mode."""
        positive = np.asarray(self.diagnostics.get("positive"), bool)
        theta = np.asarray(theta, float)
        w = np.where(positive, np.log(np.where(positive, theta, 1.0)), theta)
        return np.abs(w - self.w_hat[: len(self.names)]) <= n_sd * self.sd

    def to_dict(self) -> dict:
        return {
            "names": list(self.names),
            "theta_hat": dict(zip(self.names, map(float, self.theta_hat))),
            "theta_sd": dict(zip(self.names, map(float, self.theta_sd))),
            "working_sd": dict(zip(self.names, map(float, self.sd))),
            "eta_hat": [float(e) for e in self.eta_hat],
            "cov": self.cov.tolist(),
            "logpost": float(self.logpost),
            "grad_norm": float(self.grad_norm),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
        }


def laplace_covariance(H):
    """``-H^{-1}`` with eigenvalues of the inverse floored at zero.

    Returns the covariance and whether any projection was needed.
    """
    H = 0.5 * (H + H.T)
    if not np.all(np.isfinite(H)):
        raise HessianError("Hessian has non-finite entries")
    lam, U = np.linalg.eigh(-H)
    projected = bool(np.any(lam <= 0))
    inv = np.where(lam > 0, 1.0 / np.where(lam > 0, lam, 1.0), 0.0)
    return (U * inv) @ U.T, projected


def laplace_fit(objective: Objective, w0=None, max_iter=MAX_ITER, method=None,
                strict=False, max_step=None) -> LaplaceResult:
    """Maximize the log-posterior and form the Laplace approximation.

    Parameters
    ----------
    objective : Objective
    w0 : array, optional
        Starting point on the working scale (defaults to ``spec`` initial values).
    method : {"newton", "bfgs"}, optional
        Newton uses the full Hessian at every step (with negative curvature
        flipped); the default is Newton for objectives with autodiff
        derivatives and BFGS otherwise.
    strict : bool
        Raise :class:`NoConvergenceError` (carrying the result) instead of
        returning a result flagged ``converged=False``.
    """
    spec = objective.spec
    w0 = spec.to_working(spec.init) if w0 is None else np.asarray(w0, float)
    start = time.perf_counter()

    def f_and_g(w):
        v, g = objective.value_and_grad(w)
        return -v, -np.asarray(g)

    def tol_fn(f, g):
        return np.isfinite(f) and np.max(np.abs(g)) < GRAD_RTOL * (1.0 + abs(f))

    if method is None:
        exact = isinstance(objective, JaxObjective) and objective.derivatives == "autodiff"
        method = "newton" if exact else "bfgs"
    hess = None
    if method == "newton":
        def hess(w):
            return -objective.hessian_full(w)
    elif method != "bfgs":
        raise PodeError(f"unknown optimizer {method!r}")

    f_only = None
    if not (isinstance(objective, JaxObjective) and objective.derivatives == "autodiff"):
        def f_only(w):
            return -objective.logpost(w)

    opt = minimize(f_and_g, w0, tol_fn, max_iter=max_iter, hess=hess, max_step=max_step,
                   f=f_only)
    H = objective.hessian_theta(opt.x)
    cov, projected = laplace_covariance(H)
    theta, eta = spec.from_working(opt.x)
    result = LaplaceResult(
        names=spec.names,
        theta_hat=np.asarray(theta),
        eta_hat=np.asarray(eta),
        w_hat=opt.x,
        cov=cov,
        logpost=-opt.fun,
        grad_norm=float(np.max(np.abs(opt.grad))),
        iterations=opt.iterations,
        converged=opt.converged,
        diagnostics={
            "message": opt.message,
            "psd_projected": projected,
            "evaluations": objective.n_evals,
            "infeasible_evaluations": objective.failures,
            "positive": spec.positive,
            "wallclock_seconds": time.perf_counter() - start,
        },
    )
    if strict and not result.converged:
        raise NoConvergenceError(opt.message, result)
    return result
