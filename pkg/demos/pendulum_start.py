"""Pendulum fitted from a poor start with DALTON and with the Runge-Kutta likelihood.

    python3 demos/pendulum_start.py [seed]
"""

import sys

import numpy as np

from pode import workflow as wf
from pode.models import get_model, simulate_data

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
model = get_model("pendulum")
meas = simulate_data(model, seed=seed)
theta0 = np.array(model.notes["theta0"])

for engine in ("dalton", "rk"):
    r = wf.fit(model, meas, engine, theta0=theta0)
    est = ", ".join(f"{n}={v:.3f}" for n, v in zip(r.names, r.theta_hat))
    print(f"{engine:>6}: {est}  ({r.iterations} iterations, "
          f"{r.diagnostics['wallclock_seconds']:.0f}s)")
