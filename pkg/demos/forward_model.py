"""
Where does an underactuated chain settle?
=========================================

Two motors pull flexion tendons over three joints.  For a motor command the
chain settles at the lowest-energy pose that keeps every tendon non-slack
with at least one taut.  This script walks through the solver modes on the
desk-scale design and prints a coarse map of the satisfied set.
"""
import numpy as np

from tendonopt import DesignParams, ChainState, SolverConfig, solve_forward, manifold_map
from tendonopt.chain import tendon_slack, stored_energy

design = DesignParams.paper_initial(link_lengths=[0.13, 0.13, 0.13])
print("flexion radii\n", design.flexion_radii)

# a single tendon taut: the first motor alone bends the chain
command = np.array([0.9, 0.3])
state = solve_forward(design, ChainState.zero(design), command)
print("\ncommand", command)
print("joint angles", state.joint_angles.round(4))
print("slack", tendon_slack(state.joint_angles, command, design).round(6))
print("ee", state.ee_position.round(4))

# both taut: the second motor picks a point on the taut line
command = np.array([0.94, 2.41])
for mode in ("global", "oracle", "warm_start_local"):
    s = solve_forward(design, ChainState.zero(design), command, SolverConfig(mode=mode))
    print(f"{mode:>17}: theta={s.joint_angles.round(4)} energy={stored_energy(s.joint_angles, design):.3e}")

# the satisfied set on a slice with joint 1 pinned at zero
grid = manifold_map(design, np.array([0.6, 0.9]), {1: 0.0}, SolverConfig(grid_resolution=21))
print("\nsatisfied cells (rows: joint 0, columns: joint 2)")
for row in grid.satisfied:
    print("".join("#" if v else "." for v in row))
