"""Simulation and design co-optimization for planar tendon-driven chains."""
from .chain import (
    ChainState,
    DesignParams,
    TaskSpec,
    constraints_satisfied,
    elastic_elongation,
    forward_kinematics,
    reward,
    stored_energy,
    tendon_slack,
)
from .cma import CmaConfig, CmaResult, cmaes_minimize
from .errors import (
    ConfigError,
    InfeasibleCommand,
    InvalidArgument,
    OptimizerAbort,
    TrainingDivergence,
)
from .solver import (
    ManifoldGrid,
    SolverConfig,
    benchmark_local_vs_oracle,
    brute_force_oracle,
    manifold_map,
    solve_budgeted_local,
    solve_forward,
    step,
)

__all__ = [
    "ChainState", "DesignParams", "TaskSpec", "constraints_satisfied", "elastic_elongation",
    "forward_kinematics", "reward", "stored_energy", "tendon_slack",
    "CmaConfig", "CmaResult", "cmaes_minimize",
    "ConfigError", "InfeasibleCommand", "InvalidArgument", "OptimizerAbort", "TrainingDivergence",
    "ManifoldGrid", "SolverConfig", "benchmark_local_vs_oracle", "brute_force_oracle",
    "manifold_map", "solve_budgeted_local", "solve_forward", "step",
]

__version__ = "0.1.0"
