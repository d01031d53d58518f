"""Lorenz63 on [0, 20]: data-free solution versus DALTON's data-conditioned one.

    python3 demos/lorenz_solution.py
"""

import numpy as np

from pode import workflow as wf
from pode.models import get_model, simulate_data

model = get_model("lorenz63")
meas = simulate_data(model, seed=0)
theta = model.true_theta

free, ref = wf.solution(model, theta, "datafree", dt=0.005)
dalton, _ = wf.solution(model, theta, "dalton", dt=0.005, meas=meas)
for name, out in (("data-free", free), ("dalton", dalton)):
    err = np.abs(out.solution() - ref).max(axis=0)
    print(f"{name:>10}: max |error| per component {np.round(err, 3).tolist()}")
