"""
Glue between benchmark models, likelihood engines and inference.

These helpers fix the conventions used by the CLI and the demo scripts:
one prior block per ODE variable with ``q_k + 2`` slots, the engine's
default blockwise linearization, and parameters ordered as in
``problem.theta_names``.
"""

import numpy as np

from pode.errors import ConfigError, UnsupportedError
from pode.inference import CallableObjective, JaxObjective, ParamSpec, laplace_fit
from pode.likelihood import ENGINES, evaluate, loglik_function, solve
from pode.models import ModelDef, rk_loglik, rk_solve
from pode.ode import build_grid, default_slots
from pode.prior import IbmPrior

ALL_ENGINES = ENGINES + ("rk",)
ETA_GRID = np.arange(-8.0, 8.5, 1.0)


def make_prior(model: ModelDef, eta=None, slots=None) -> IbmPrior:
    slots = default_slots(model.problem) if slots is None else tuple(slots)
    eta = model.eta0 if eta is None else np.broadcast_to(np.asarray(eta, float), len(slots))
    return IbmPrior(slots, tuple(float(e) for e in eta))


def default_engine(model: ModelDef) -> str:
    return "dalton-ng" if model.counts else "dalton"


def check_engine(engine: str, model: ModelDef):
    if engine not in ALL_ENGINES:
        raise ConfigError(f"unknown engine {engine!r}; choose from {ALL_ENGINES}")
    if model.counts and engine in ("dalton", "fenrir"):
        raise UnsupportedError(f"engine {engine!r} needs Gaussian measurements; "
                          f"model {model.name!r} has count data (use dalton-ng)")


def make_grid(model: ModelDef, dt, meas):
    return build_grid(dt, model.problem.horizon, meas.times)


def loglik(model: ModelDef, meas, theta, engine=None, dt=None, eta=None,
           linearization="blockwise", slots=None) -> float:
    """Log-likelihood of ``meas`` under one engine (``"rk"`` for the exact-solution baseline)."""
    engine = engine or default_engine(model)
    check_engine(engine, model)
    if engine == "rk":
        return rk_loglik(model, meas, theta)
    dt = model.dt if dt is None else dt
    prior = make_prior(model, eta, slots)
    grid = make_grid(model, dt, meas)
    return evaluate(engine, model.problem, prior, grid, meas, theta, linearization=linearization)


def objective(model: ModelDef, meas, engine=None, dt=None, theta0=None, eta0=None,
              linearization="blockwise", executor=None, eta_shared=True, slots=None,
              derivatives=None):
    """Working-scale log-posterior for ``laplace_fit``.

    ``eta_shared`` ties the prior scales to one free multiplier of ``eta0``;
    ``derivatives`` defaults to the model's own setting.
    """
    engine = engine or default_engine(model)
    check_engine(engine, model)
    theta0 = model.true_theta if theta0 is None else np.asarray(theta0, float)
    if engine == "rk":
        spec = ParamSpec.for_problem(model.problem, theta0)
        return CallableObjective(lambda th, eta: rk_loglik(model, meas, th), spec, executor)
    if engine == "datafree":
        raise ConfigError("the data-free engine has no data likelihood to fit")
    dt = model.dt if dt is None else dt
    prior = make_prior(model, eta0, slots)
    spec = ParamSpec.for_problem(model.problem, theta0, prior.scales, eta_shared=eta_shared)
    grid = make_grid(model, dt, meas)
    fn = loglik_function(engine, model.problem, prior.orders, grid, meas, linearization)
    # keyed on the data layout, not the values
    key = (engine, model.problem, prior.orders, grid, meas.model, meas.values.shape, linearization)
    return JaxObjective(fn, spec, cache_key=key, data=meas.values,
                        derivatives=derivatives or model.derivatives)


def initial_scale(obj, w0, grid=ETA_GRID):
    """Best shared prior-scale multiplier on a coarse grid, holding ``theta`` at its start."""
    k = obj.spec.n_theta
    if obj.spec.n_eta != 1:
        return w0
    best, best_w = -np.inf, w0
    for s in grid:
        w = np.concatenate([w0[:k], [s]])
        v = obj.logpost(w)
        if v > best:
            best, best_w = v, w
    return best_w


def fit(model: ModelDef, meas, engine=None, dt=None, theta0=None, eta0=None,
        eta_search=True, **kwargs):
    """Laplace fit; extra keyword arguments go to :func:`laplace_fit`.

    With ``eta_search`` (and tied scales) the starting prior scale is the best
    of a coarse grid of multipliers ``exp(-8..8)`` at ``theta0``.
    """
    lin = kwargs.pop("linearization", "blockwise")
    executor = kwargs.pop("executor", None)
    shared = kwargs.pop("eta_shared", True)
    slots = kwargs.pop("slots", None)
    derivatives = kwargs.pop("derivatives", None)
    obj = objective(model, meas, engine, dt, theta0, eta0, lin, executor, shared, slots,
                    derivatives)
    w0 = kwargs.pop("w0", None)
    if w0 is None:
        w0 = obj.spec.to_working(obj.spec.init)
        if eta_search:
            w0 = initial_scale(obj, w0)
    return laplace_fit(obj, w0=w0, **kwargs)


def solution(model: ModelDef, theta, engine="datafree", dt=None, meas=None, eta=None,
             linearization="blockwise", slots=None):
    """Smoothed solution and its Runge-Kutta reference on the solver grid.

    Returns ``(SolverOutput, rk)`` where ``rk`` has the natural state at the
    grid times.
    """
    if engine not in ("datafree", "dalton", "dalton-ng"):
        raise ConfigError(f"engine {engine!r} does not produce a solution")
    check_engine(engine, model)
    dt = model.dt if dt is None else dt
    prior = make_prior(model, eta, slots)
    use_data = meas is not None and engine != "datafree"
    grid = build_grid(dt, model.problem.horizon, meas.times if use_data else ())
    out = solve(engine, model.problem, prior, grid, theta, meas=meas if use_data else None,
                linearization=linearization)
    ref = rk_solve(model.problem, theta, grid.times)
    return out, ref
