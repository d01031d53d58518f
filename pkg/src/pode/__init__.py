"""Probabilistic ODE solvers and data-adaptive likelihood approximations."""

import jax

# filters need double precision; must run before any array is created
jax.config.update("jax_enable_x64", True)

from pode.errors import (  # noqa: E402
    ConfigError,
    DivergedError,
    GridError,
    HessianError,
    InvalidPriorError,
    NoConvergenceError,
    NonFiniteError,
    NumericalError,
    PodeError,
    SingularMatrixError,
    UnsupportedError,
)
from pode.likelihood import (  # noqa: E402
    SolverOutput,
    dalton_gaussian_loglik,
    dalton_nongaussian_loglik,
    datafree_filter,
    datafree_smooth,
    evaluate,
    fenrir_loglik,
    solve,
)
from pode.measurement import (  # noqa: E402
    GaussianMeasurement,
    GeneralMeasurement,
    MeasurementSet,
    poisson_measurement,
    quadratic_measurement,
)
from pode.ode import OdeProblem, build_grid, default_slots, pad_to_prior_order  # noqa: E402
from pode.prior import IbmPrior, ibm_transition  # noqa: E402

__version__ = "0.1.0"
