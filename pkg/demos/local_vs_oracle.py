"""
Budgeted local solver against the oracle
========================================

A penalty-method descent with a fixed step budget is compared with the
exhaustive oracle on random commands.  The mean end-effector error depends
on the design, which is what makes the manifold shape worth optimizing.
"""
import numpy as np

from tendonopt import DesignParams, benchmark_local_vs_oracle

design = DesignParams.paper_initial(link_lengths=[0.13, 0.13, 0.13])
records = benchmark_local_vs_oracle(design, n_actions=20, steps=500, seed=0)
err = np.array([r["ee_error"] for r in records])
print(f"mean ee error {err.mean():.3e} m, worst {err.max():.3e} m")
print("converged:", sum(r["converged"] for r in records), "of", len(records))

for r in sorted(records, key=lambda r: -r["ee_error"])[:3]:
    print("hardest command", np.round(r["motor_angles"], 3), f"error {r['ee_error']:.2e}")
