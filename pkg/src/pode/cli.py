"""
Command-line front end.

    pode simulate|fit|loglik|slice|solve [--config run.json] [options]

Options given on the command line override the JSON config, whose keys are
the long option names with dashes replaced by underscores (``max_iter``,
``linearization`` ...).  Time series are written as CSV with 17 significant
digits, results as JSON.  Exit codes: 0 success, 2 configuration error,
3 numerical failure, 4 non-convergence.  ``PODE_LOG`` sets the logging
level (e.g. ``INFO``, ``DEBUG``).
"""

import argparse
import dataclasses
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from pode import workflow as wf
from pode.errors import ConfigError, NoConvergenceError, NumericalError, PodeError
from pode.models import MODEL_NAMES, ModelDef, get_model, simulate_data

log = logging.getLogger("pode")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_NOCONVERGE = 0, 2, 3, 4
COMMANDS = ("simulate", "fit", "loglik", "slice", "solve")
_FLOAT = ".17g"


def fmt(x) -> str:
    """17 significant digits; ``repr`` round-trips the same way but is longer for ints."""
    return format(float(x), _FLOAT)


@dataclasses.dataclass
class RunConfig:
    model: str = "fn"
    engine: Optional[str] = None
    dt: Optional[float] = None
    horizon: Optional[float] = None
    theta: dict = dataclasses.field(default_factory=dict)
    eta: Optional[list] = None
    slots: Optional[list] = None
    linearization: str = "blockwise"
    data: Optional[str] = None
    seed: int = 0
    param: Optional[str] = None
    range: Optional[str] = None
    threads: int = 1
    oracle: bool = False
    max_iter: int = 500
    out: Optional[str] = None

    @classmethod
    def from_sources(cls, path=None, overrides=None) -> "RunConfig":
        raw = {}
        if path:
            try:
                with open(path) as fh:
                    raw = json.load(fh)
            except (OSError, json.JSONDecodeError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(raw, dict):
                raise ConfigError("config must be a JSON object")
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        if isinstance(raw.get("theta"), str):
            raw["theta"] = parse_theta(raw["theta"])
        if raw.get("eta") is not None:
            raw["eta"] = [float(e) for e in np.atleast_1d(raw["eta"])]
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    def validate(self):
        if self.model not in MODEL_NAMES:
            raise ConfigError(f"unknown model {self.model!r}; choose from {MODEL_NAMES}")
        if self.engine is not None and self.engine not in wf.ALL_ENGINES:
            raise ConfigError(f"unknown engine {self.engine!r}; choose from {wf.ALL_ENGINES}")
        for name in ("dt", "horizon"):
            v = getattr(self, name)
            if v is not None and not (isinstance(v, (int, float)) and v > 0):
                raise ConfigError(f"{name} must be a positive number")
        if not isinstance(self.theta, dict):
            raise ConfigError("theta must map parameter names to values")
        if int(self.threads) < 1:
            raise ConfigError("threads must be at least 1")


def parse_theta(text: str) -> dict:
    out = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ConfigError(f"expected name=value in --theta, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k.strip()] = float(v)
        except ValueError as exc:
            raise ConfigError(f"bad value for {k.strip()!r}: {v!r}") from exc
    return out


def parse_range(text: str):
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError as exc:
        raise ConfigError(f"range must be lo:hi:n, got {text!r}") from exc
    if n < 1:
        raise ConfigError("range needs at least one point")
    return lo, hi, n


# --- shared plumbing ---------------------------------------------------------------


def resolve_model(cfg: RunConfig) -> ModelDef:
    model = get_model(cfg.model)
    if cfg.horizon is not None and cfg.horizon != model.problem.horizon:
        problem = dataclasses.replace(model.problem, horizon=float(cfg.horizon))
        times = model.obs_times[model.obs_times <= cfg.horizon * (1 + 1e-12)]
        model = dataclasses.replace(model, problem=problem, obs_times=times)
    return model


def resolve_theta(cfg: RunConfig, model: ModelDef) -> np.ndarray:
    names = model.problem.theta_names
    theta = np.array(model.true_theta, float)
    for k, v in cfg.theta.items():
        if k not in names:
            raise ConfigError(f"model {model.name!r} has no parameter {k!r}; names are {names}")
        theta[names.index(k)] = float(v)
    return theta


def read_data(path: str, model: ModelDef):
    try:
        table = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except (OSError, ValueError) as exc:
        raise ConfigError(f"cannot read data {path}: {exc}") from exc
    return model.measurement_set(table[:, 0], table[:, 1:])


def load_data(cfg: RunConfig, model: ModelDef):
    if cfg.data:
        return read_data(cfg.data, model)
    return simulate_data(model, seed=int(cfg.seed))


def write_csv(header, rows, path=None) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for row in rows:
        buf.write(",".join(fmt(v) for v in row) + "\n")
    text = buf.getvalue()
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return text


def write_json(doc, path=None):
    text = json.dumps(doc, indent=2, sort_keys=True) + "\n"
    if path:
        with open(path, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


# --- commands ----------------------------------------------------------------------


def cmd_simulate(cfg: RunConfig) -> int:
    model = resolve_model(cfg)
    meas = simulate_data(model, theta=resolve_theta(cfg, model), seed=int(cfg.seed))
    m = meas.values.shape[1] if meas.values.ndim == 2 else 0
    header = ["t"] + [f"y{j + 1}" for j in range(m)]
    write_csv(header, np.column_stack([meas.times, meas.values]), cfg.out)
    return EXIT_OK


def _oracle_value(model: ModelDef, meas, theta, dt, eta):
    """Exact likelihood for the linear test model."""
    from pode.oracle import linear_ode_loglik

    if model.name != "linear":
        raise ConfigError("--oracle is only available for the linear model")
    prior = wf.make_prior(model, eta)
    grid = wf.make_grid(model, dt, meas)
    D, cov = (np.asarray(a) for a in meas.model.matrices(theta, len(meas)))
    M = np.diag(-theta[:2])
    entries = [(n, D[i], cov[i], meas.values[i]) for i, n in enumerate(grid.obs_index)]
    return linear_ode_loglik(M, np.zeros(2), theta[2:4], prior.orders, prior.scales, dt,
                             grid.N, entries)


def cmd_loglik(cfg: RunConfig) -> int:
    model = resolve_model(cfg)
    engine = cfg.engine or wf.default_engine(model)
    dt = cfg.dt or model.dt
    meas = load_data(cfg, model)
    theta = resolve_theta(cfg, model)
    doc = {"model": model.name, "engine": engine, "dt": dt,
           "theta": dict(zip(model.problem.theta_names, map(float, theta)))}
    code = EXIT_OK
    try:
        value = wf.loglik(model, meas, theta, engine, dt, cfg.eta, cfg.linearization, cfg.slots)
    except NumericalError as exc:
        value = -math.inf
        doc["error"] = {"code": exc.code, "message": str(exc)}
        code = EXIT_NUMERIC
        print(f"pode: {exc.code}: {exc}", file=sys.stderr)
    doc["loglik"] = value
    print(fmt(value))
    if cfg.oracle and code == EXIT_OK:
        exact = _oracle_value(model, meas, theta, dt, cfg.eta)
        doc["oracle"] = exact
        doc["difference"] = value - exact
        print(f"oracle {fmt(exact)}")
        print(f"difference {fmt(value - exact)}")
    if cfg.out:
        write_json(doc, cfg.out)
    return code


def cmd_fit(cfg: RunConfig) -> int:
    model = resolve_model(cfg)
    engine = cfg.engine or wf.default_engine(model)
    dt = cfg.dt or model.dt
    meas = load_data(cfg, model)
    theta0 = resolve_theta(cfg, model)
    result = wf.fit(model, meas, engine, dt=dt, theta0=theta0, eta0=cfg.eta,
                    linearization=cfg.linearization, slots=cfg.slots,
                    max_iter=int(cfg.max_iter))
    d = result.to_dict()
    diag = {k: v for k, v in result.diagnostics.items() if k not in ("positive", "wallclock_seconds")}
    doc = {
        "engine": engine, "model": model.name, "dt": dt,
        "theta_hat": d["theta_hat"], "theta_sd": d["theta_sd"], "cov": d["cov"],
        "logpost": d["logpost"], "grad_norm": d["grad_norm"], "iterations": d["iterations"],
        "converged": d["converged"],
        "wallclock_seconds": result.diagnostics["wallclock_seconds"],
        "diagnostics": {**diag, "eta_hat": d["eta_hat"], "working_sd": d["working_sd"]},
    }
    write_json(doc, cfg.out)
    return EXIT_OK if result.converged else EXIT_NOCONVERGE


def slice_values(model, meas, theta, param, grid_vals, engine, dt, eta, linearization,
                 slots=None, threads=1):
    names = model.problem.theta_names
    if param not in names:
        raise ConfigError(f"model {model.name!r} has no parameter {param!r}; names are {names}")
    j = names.index(param)

    def one(v):
        th = np.array(theta, float)
        th[j] = v
        try:
            return wf.loglik(model, meas, th, engine, dt, eta, linearization, slots)
        except NumericalError:
            return -math.inf

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return np.array(list(pool.map(one, grid_vals)))
    return np.array([one(v) for v in grid_vals])


def cmd_slice(cfg: RunConfig) -> int:
    model = resolve_model(cfg)
    if not cfg.param or not cfg.range:
        raise ConfigError("slice needs --param and --range lo:hi:n")
    lo, hi, n = parse_range(cfg.range)
    engine = cfg.engine or wf.default_engine(model)
    dt = cfg.dt or model.dt
    meas = load_data(cfg, model)
    grid_vals = np.linspace(lo, hi, n) if n > 1 else np.array([lo])
    ll = slice_values(model, meas, resolve_theta(cfg, model), cfg.param, grid_vals, engine, dt,
                      cfg.eta, cfg.linearization, cfg.slots, int(cfg.threads))
    write_csv([cfg.param, "loglik"], np.column_stack([grid_vals, ll]), cfg.out)
    return EXIT_OK


def cmd_solve(cfg: RunConfig) -> int:
    model = resolve_model(cfg)
    engine = cfg.engine or "datafree"
    dt = cfg.dt or model.dt
    meas = None if engine == "datafree" else load_data(cfg, model)
    out, ref = wf.solution(model, resolve_theta(cfg, model), engine, dt, meas, cfg.eta,
                           cfg.linearization, cfg.slots)
    mean, sd = out.solution(), out.solution_sd()
    names = state_names(model)
    header = (["t"] + [f"{v}_mean" for v in names] + [f"{v}_sd" for v in names]
              + [f"{v}_rk" for v in names])
    write_csv(header, np.column_stack([out.times, mean, sd, ref]), cfg.out)
    err = np.max(np.abs(mean - ref), axis=0)
    log.info("max abs error vs RK: %s", dict(zip(names, err)))
    if cfg.out:
        print(json.dumps({"max_abs_error": dict(zip(names, map(float, err)))}))
    return EXIT_OK


def state_names(model: ModelDef):
    """``x``, ``x_d1``, ... for each variable of the natural state."""
    p = model.problem
    var = p.var_names or tuple(f"x{k + 1}" for k in range(len(p.orders)))
    return [v if r == 0 else f"{v}_d{r}" for v, q in zip(var, p.orders) for r in range(q)]


_HANDLERS = {"simulate": cmd_simulate, "fit": cmd_fit, "loglik": cmd_loglik,
             "slice": cmd_slice, "solve": cmd_solve}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pode", description="Probabilistic ODE likelihoods.")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON run configuration")
    parser.add_argument("--model", choices=MODEL_NAMES)
    parser.add_argument("--engine", choices=wf.ALL_ENGINES)
    parser.add_argument("--dt", type=float)
    parser.add_argument("--horizon", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--theta", help="parameter values as name=value,...")
    parser.add_argument("--eta", type=float, nargs="+", help="prior scale(s)")
    parser.add_argument("--slots", type=int, nargs="+", help="prior slots per variable")
    parser.add_argument("--linearization", choices=("blockwise", "full", "zeroth"))
    parser.add_argument("--data", help="CSV written by `pode simulate`")
    parser.add_argument("--param", help="parameter swept by `slice`")
    parser.add_argument("--range", help="lo:hi:n for `slice`")
    parser.add_argument("--threads", type=int)
    parser.add_argument("--oracle", action="store_true", default=None,
                        help="also print the exact value (linear model)")
    parser.add_argument("--max-iter", type=int, dest="max_iter")
    parser.add_argument("--out", help="output path (stdout if omitted)")
    return parser


def _setup_logging():
    level = os.environ.get("PODE_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    overrides = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        cfg = RunConfig.from_sources(args.config, overrides)
        return _HANDLERS[args.command](cfg)
    except ConfigError as exc:
        print(f"pode: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"pode: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NoConvergenceError as exc:
        print(f"pode: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_NOCONVERGE
    except PodeError as exc:
        print(f"pode: {exc.code}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
