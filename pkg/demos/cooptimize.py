"""
Co-optimizing hardware and control
==================================

A short refabrication run on the desk-scale chain.  Each epoch collects
simulator rollouts, fits the hardware proxy, improves the policy through
the proxy, and every few epochs CMA-ES turns the proxy back into explicit
radii, pretensions and link lengths.  The fixed-design baseline runs the
same loop with the hardware frozen.

This takes a few minutes; pass a smaller epoch count to go faster.
"""
import sys

from tendonopt import DesignParams
from tendonopt.chain import TaskSpec
from tendonopt.cooptim import TrainConfig, morph_loop

epochs = int(sys.argv[1]) if len(sys.argv) > 1 else 100
design = DesignParams.paper_initial(link_lengths=[0.13, 0.13, 0.13])
task = TaskSpec(goal=(0.13, 0.3))

for mode in ("refab", "fixed_design_baseline"):
    cfg = TrainConfig(mode=mode, epochs=epochs, alpha=30.0, seed=0, length_bounds=(0.05, 0.2))
    res = morph_loop(cfg, design, [task])
    print(f"{mode:>22}: final distance {1000 * res.mean_distance:.1f} mm, return {res.final_return:.5f}")
    if mode == "refab":
        print("  radii\n", res.final_design.flexion_radii.round(4))
        print("  links", res.final_design.link_lengths.round(4))
