"""SEIRAH with Poisson counts: DALTON-NG at several steps, then a fit at dt = 0.1.

    python3 demos/seirah_counts.py
"""

from pode import workflow as wf
from pode.models import get_model, simulate_data

model = get_model("seirah")
meas = simulate_data(model, seed=0)

for dt in (1.0, 0.5, 0.1):
    print(f"dt={dt}: loglik at truth {wf.loglik(model, meas, model.true_theta, 'dalton-ng', dt):.3f}")

r = wf.fit(model, meas, "dalton-ng", dt=0.1)
for name, est, sd, truth in zip(r.names, r.theta_hat, r.theta_sd, model.true_theta):
    print(f"{name:>6}: {est:10.4f} +- {sd:.4f}   (true {truth})")
