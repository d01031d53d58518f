"""FitzHugh-Nagumo: DALTON and Fenrir likelihood slices in c at a fine and a coarse step.

The prior scale is picked once per engine and step (best multiplier of the
default scale at the true parameters), as a fit would start.

    python3 demos/fn_coarse_step.py
"""

import numpy as np

from pode import workflow as wf
from pode.models import get_model, simulate_data

model = get_model("fn")
meas = simulate_data(model, seed=0)
cs = np.linspace(2.5, 3.5, 11)
engines = ("dalton", "fenrir")


def best_eta(engine, dt):
    obj = wf.objective(model, meas, engine, dt)
    w = wf.initial_scale(obj, obj.spec.to_working(obj.spec.init))
    return model.eta0 * np.exp(w[-1])


for dt in (0.025, 0.2):
    etas = {e: best_eta(e, dt) for e in engines}
    print(f"dt = {dt}")
    print(f"{'c':>6} {'dalton':>14} {'fenrir':>14}")
    for c in cs:
        theta = model.true_theta.copy()
        theta[2] = c
        row = [wf.loglik(model, meas, theta, e, dt, eta=etas[e]) for e in engines]
        print(f"{c:6.2f} {row[0]:14.3f} {row[1]:14.3f}")
