"""Forward actuation model: joint angles that minimize stored elastic energy
subject to non-negative tendon slack with at least one taut tendon.

Three solve modes are offered through :func:`solve_forward`:

``global``
    Grid screening over the joint limits, then an exact polish on the
    faces (taut-tendon sets) of the best cells.
``oracle``
    Exhaustive grid plus an SLSQP polish of the single best cell; kept
    independent of the exact active-set machinery so it can check it.
``warm_start_local``
    Penalty descent from the seed state followed by an exact polish on
    the face it lands on, so the answer depends on the seed.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.optimize import minimize

from .chain import (
    DEFAULT_TOL,
    ChainState,
    constraints_satisfied,
    forward_kinematics,
    reward,
    stored_energy,
    tendon_slack,
)
from .errors import InfeasibleCommand, InvalidArgument

MODES = ("warm_start_local", "global", "oracle")

# exactness threshold for active-set candidates (meters / radians)
_EXACT_TOL = 1e-12


@dataclass(frozen=True)
class SolverConfig:
    grid_resolution: int = 21
    local_max_iters: int = 200
    constraint_tol: float = DEFAULT_TOL
    energy_tol: float = 1e-12
    mode: str = "global"
    polish_cells: int = 5

    def __post_init__(self):
        if int(self.grid_resolution) < 2:
            raise InvalidArgument("grid_resolution must be >= 2")
        if int(self.local_max_iters) < 1:
            raise InvalidArgument("local_max_iters must be >= 1")
        if not (self.constraint_tol > 0 and self.energy_tol > 0):
            raise InvalidArgument("tolerances must be > 0")
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if int(self.polish_cells) < 1:
            raise InvalidArgument("polish_cells must be >= 1")

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return SolverConfig(**d)

    def to_dict(self):
        return {"grid_resolution": self.grid_resolution, "local_max_iters": self.local_max_iters,
                "constraint_tol": self.constraint_tol, "energy_tol": self.energy_tol,
                "mode": self.mode, "polish_cells": self.polish_cells}


@dataclass
class ManifoldGrid:
    axes: list
    satisfied: np.ndarray
    energy: np.ndarray
    fixed_joints: dict = field(default_factory=dict)
    free_joints: tuple = ()

    def __post_init__(self):
        shape = tuple(len(a) for a in self.axes)
        if self.satisfied.shape != shape or self.energy.shape != shape:
            raise InvalidArgument("satisfied/energy shapes do not match axes")

    def to_csv(self, path):
        n = len(self.axes) + len(self.fixed_joints)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"theta_{i}" for i in range(n)] + ["satisfied", "energy"])
            for idx in itertools.product(*(range(len(a)) for a in self.axes)):
                theta = np.empty(n)
                for j, v in self.fixed_joints.items():
                    theta[j] = v
                for j, k in zip(self.free_joints, idx):
                    theta[j] = self.axes[self.free_joints.index(j)][k]
                writer.writerow([repr(float(t)) for t in theta]
                                + [int(self.satisfied[idx]), repr(float(self.energy[idx]))])


@dataclass(frozen=True)
class LocalResult:
    state: ChainState
    converged: bool
    iterations: int
    violation: float


# ---------------------------------------------------------------------------
# exact active-set enumeration

@lru_cache(maxsize=256)
def _active_set_table(rf_bytes, shape, pre_bytes, r_e, lo, hi):
    """Affine maps ``theta = a_k + G_k @ (R^A theta_A)`` for every combination
    of taut-tendon subset and joint status (free / at lower / at upper limit).
    """
    rf = np.frombuffer(rf_bytes).reshape(shape)
    pre = np.frombuffer(pre_bytes)
    m, n = shape
    theta0 = -pre / r_e
    status = np.array(list(itertools.product((0, 1, 2), repeat=n)), dtype=np.int8)
    free = status == 0
    base = np.where(free, theta0, np.where(status == 1, lo, hi))
    a_all, g_all, s_all = [], [], []
    for size in range(1, m + 1):
        for subset in itertools.combinations(range(m), size):
            idx = list(subset)
            a_s = rf[idx]
            a_sf = a_s[None, :, :] * free[:, None, :]
            gram = a_sf @ np.swapaxes(a_sf, 1, 2)
            proj = np.swapaxes(a_sf, 1, 2) @ np.linalg.pinv(gram)
            a_all.append(base - np.einsum("kns,ks->kn", proj, base @ a_s.T))
            g = np.zeros((len(status), n, m))
            g[:, :, idx] = proj
            g_all.append(g)
            mask = np.zeros((len(status), m), dtype=bool)
            mask[:, idx] = True
            s_all.append(mask)
    return np.concatenate(a_all), np.concatenate(g_all), np.concatenate(s_all)


def _table(design):
    rf = np.ascontiguousarray(design.flexion_radii)
    pre = np.ascontiguousarray(design.pretension)
    lo, hi = design.joint_limits
    return _active_set_table(rf.tobytes(), rf.shape, pre.tobytes(),
                             design.extension_radius, lo, hi)


def solve_exact(design, motor_angles, faces=None):
    """Global minimizers for a batch of motor commands.

    Every KKT point of the energy minimization restricted to a face
    ``{w_i = 0, w >= 0}`` is the equality-constrained minimizer of some
    active-set combination, so the lowest-energy primal-feasible candidate
    is the global answer.  ``faces`` optionally restricts the search to
    combinations whose taut set meets the given tendon mask.

    Returns ``(joint_angles, energy, feasible)`` with batch leading dims.
    """
    motors = np.asarray(motor_angles, dtype=float)
    single = motors.ndim == 1
    motors = np.atleast_2d(motors)
    if motors.shape[-1] != design.n_tendons:
        raise InvalidArgument(f"expected {design.n_tendons} motor angles")
    a, g, s_mask = _table(design)
    if faces is not None:
        keep = np.any(s_mask & np.asarray(faces, dtype=bool), axis=1)
        a, g, s_mask = a[keep], g[keep], s_mask[keep]
    lo, hi = design.joint_limits
    take_up = motors * design.winch_radii
    theta = a[None] + np.einsum("knm,bm->bkn", g, take_up)
    w = theta @ design.flexion_radii.T - take_up[:, None, :]
    ok = np.all(w >= -_EXACT_TOL, axis=2)
    ok &= np.all(np.where(s_mask[None], np.abs(w), 0.0) <= _EXACT_TOL, axis=2)
    ok &= np.all((theta >= lo - _EXACT_TOL) & (theta <= hi + _EXACT_TOL), axis=2)
    energy = stored_energy(theta, design)
    masked = np.where(ok, energy, np.inf)
    best = np.argmin(masked, axis=1)
    rows = np.arange(len(motors))
    out = np.clip(theta[rows, best], lo, hi)
    feasible = np.isfinite(masked[rows, best])
    out_energy = stored_energy(out, design)
    if single:
        return out[0], float(out_energy[0]), bool(feasible[0])
    return out, out_energy, feasible


def command_scale(design, motor_angles):
    """Largest ``s`` in [0, 1] such that ``s * motor_angles`` is achievable."""
    motors = np.asarray(motor_angles, dtype=float)
    lo, hi = design.joint_limits
    if lo == 0.0 and np.all(motors >= 0):
        # theta = 0 leaves every slack <= 0, so the command is achievable
        # exactly when the fully flexed chain leaves every slack >= 0
        reach = design.flexion_radii.sum(axis=1) * hi
        demand = design.winch_radii * motors
        with np.errstate(divide="ignore"):
            ratio = np.where(demand > 0, reach / demand, np.inf)
        return float(min(1.0, ratio.min()))
    if solve_exact(design, motors)[2]:
        return 1.0
    lo_s, hi_s = 0.0, 1.0
    if not solve_exact(design, 0.0 * motors)[2]:
        return 0.0
    for _ in range(50):
        mid = 0.5 * (lo_s + hi_s)
        if solve_exact(design, mid * motors)[2]:
            lo_s = mid
        else:
            hi_s = mid
    return lo_s


def project_command(design, motor_angles):
    """Scale an unachievable command toward zero until it becomes achievable.

    Returns ``(command, projected)``.
    """
    motors = np.asarray(motor_angles, dtype=float)
    s = command_scale(design, motors)
    if s >= 1.0:
        return motors.copy(), False
    return motors * s, True


def solve_exact_projected(design, motor_angles):
    """Batched ground-truth transition including infeasible-command projection.

    Returns ``(joint_angles, ee_positions, applied_commands)``.
    """
    motors = np.atleast_2d(np.asarray(motor_angles, dtype=float))
    lo, hi = design.joint_limits
    if lo == 0.0 and np.all(motors >= 0):
        reach = design.flexion_radii.sum(axis=1) * hi
        demand = design.winch_radii * motors
        with np.errstate(divide="ignore"):
            ratio = np.where(demand > 0, reach / demand, np.inf)
        applied = motors * np.minimum(1.0, ratio.min(axis=1))[:, None]
    else:
        applied = np.array([project_command(design, m)[0] for m in motors])
    theta, _, feasible = solve_exact(design, applied)
    if not np.all(feasible):
        # boundary commands can miss by round-off; nudge inward
        bad = ~feasible
        applied[bad] *= 1.0 - 1e-9
        theta[bad] = solve_exact(design, applied[bad])[0]
    _, ee = forward_kinematics(theta, design.link_lengths)
    return theta, ee, applied


# ---------------------------------------------------------------------------
# grid machinery

def grid_axes(design, resolution):
    lo, hi = design.joint_limits
    return np.linspace(lo, hi, int(resolution))


def tautness_band(design, step, tol):
    """Per-tendon band: half the smallest change of that tendon's slack
    across one step of a swept joint (joints with zero step are pinned)."""
    step = np.asarray(step, dtype=float)
    swept = step > 0
    per_step = design.flexion_radii[:, swept] * step[swept]
    return np.maximum(tol, 0.5 * per_step.min(axis=1))


def within_band(w, band):
    """Every slack at least ``-band`` and some tendon within its band of taut."""
    return np.all(w >= -band, axis=-1) & np.any(w <= band, axis=-1)


def _band_violation(w, band):
    over = np.max(np.maximum(-band - w, 0.0), axis=-1)
    slack = np.maximum(np.min(w - band, axis=-1), 0.0)
    return np.maximum(over, slack)


def _grid_points(design, resolution):
    ax = grid_axes(design, resolution)
    mesh = np.meshgrid(*([ax] * design.n_joints), indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1), ax


def _sorted_cells(pts, w, energy):
    keys = [pts[:, j] for j in reversed(range(pts.shape[1]))] + [energy]
    order = np.lexsort(keys)
    return pts[order], w[order], energy[order]


def _grid_scan(design, motor_angles, cfg, keep_all=False):
    """Satisfied cells of the full joint-limit grid, sorted by energy with
    lexicographic joint-angle tie-breaking.  With ``keep_all`` and no
    satisfied cell, the least-violating cells are returned instead."""
    pts, ax = _grid_points(design, cfg.grid_resolution)
    step = ax[1] - ax[0]
    band = tautness_band(design, np.full(design.n_joints, step), cfg.constraint_tol)
    w = tendon_slack(pts, motor_angles, design)
    sat = within_band(w, band)
    if not sat.any() and keep_all:
        viol = _band_violation(w, band)
        sat = viol <= viol.min()
    pts, w = pts[sat], w[sat]
    pts, w, energy = _sorted_cells(pts, w, stored_energy(pts, design))
    return pts, w, energy, band, step


def _state(design, theta, motor_angles):
    return ChainState.from_joints(design, theta, np.asarray(motor_angles, dtype=float))


def _certify(design, theta, motor_angles, cfg):
    w = tendon_slack(theta, motor_angles, design)
    if not constraints_satisfied(w, cfg.constraint_tol):
        raise InfeasibleCommand(
            f"solver output violates slack constraints (min slack {w.min():.3e})", motor_angles)


def _solve_global(design, motor_angles, cfg):
    pts, w, energy, band, _ = _grid_scan(design, motor_angles, cfg)
    theta = None
    if len(pts):
        faces = np.any(w[: cfg.polish_cells] <= band, axis=0)
        theta, _, ok = solve_exact(design, motor_angles, faces=faces)
        if not ok:
            theta = None
    if theta is None:
        theta, _, ok = solve_exact(design, motor_angles)
        if not ok:
            raise InfeasibleCommand(
                f"motor command {np.asarray(motor_angles).tolist()} is outside the achievable manifold",
                motor_angles)
    return theta


def brute_force_oracle(design, motor_angles, cfg=None):
    """Exhaustive grid search followed by an SLSQP polish of the best cell.

    The polish is tried on each tendon's taut face in order of the cell's
    slack; when no cell lies within the tautness band (thin feasible
    slivers) it starts from the least-violating cell.  Only a certified
    polished point is returned.
    """
    cfg = cfg or SolverConfig(mode="oracle")
    motors = _check_motors(design, motor_angles)
    pts, w, _, _, _ = _grid_scan(design, motors, cfg, keep_all=True)
    best, best_energy = None, np.inf
    for taut in np.argsort(w[0], kind="stable"):
        theta = _slsqp_polish(design, motors, pts[0], int(taut))
        if theta is None:
            continue
        if constraints_satisfied(tendon_slack(theta, motors, design), cfg.constraint_tol):
            e = float(stored_energy(theta, design))
            if e < best_energy - cfg.energy_tol:
                best, best_energy = theta, e
    if best is None:
        raise InfeasibleCommand(
            f"no grid cell satisfies the slack constraints for command {motors.tolist()}", motors)
    return _state(design, best, motors)


def _slsqp_polish(design, motors, start, taut):
    lo, hi = design.joint_limits
    rf = design.flexion_radii
    scale = 1.0 / rf.max()
    rest = design.pretension / design.extension_radius
    take_up = design.winch_radii * motors

    def fun(x):
        d = x + rest
        return 0.5 * float(d @ d), d

    cons = [{"type": "eq", "fun": lambda x: scale * (rf[taut] @ x - take_up[taut]),
             "jac": lambda x: scale * rf[taut]}]
    others = [i for i in range(design.n_tendons) if i != taut]
    if others:
        cons.append({"type": "ineq", "fun": lambda x: scale * (rf[others] @ x - take_up[others]),
                     "jac": lambda x: scale * rf[others]})
    res = minimize(fun, np.asarray(start, dtype=float), jac=True, method="SLSQP",
                   bounds=[(lo, hi)] * design.n_joints, constraints=cons,
                   options={"ftol": 1e-15, "maxiter": 500})
    if not np.all(np.isfinite(res.x)):
        return None
    return np.clip(res.x, lo, hi)


# ---------------------------------------------------------------------------
# penalty-method local descent

def _penalty_terms(design, theta, motors, mu):
    """Scaled penalty objective and its gradient."""
    rf = design.flexion_radii
    scale = 1.0 / rf.max()
    d = theta + design.pretension / design.extension_radius
    g = scale * (rf @ theta - design.winch_radii * motors)
    neg = np.minimum(g, 0.0)
    i = int(np.argmin(np.abs(g)))
    value = 0.5 * d @ d + mu * (neg @ neg + g[i] ** 2)
    grad = d + 2 * mu * scale * (rf.T @ neg + g[i] * rf[i])
    return value, grad


def solve_budgeted_local(design, seed, motor_angles, steps, cfg=None):
    """Budget-limited constrained local descent from ``seed``.

    Quadratic penalty on negative slack and on the smallest absolute slack,
    projected gradient steps with Armijo backtracking, and a penalty weight
    raised tenfold five times over the budget.  Returns the latest iterate
    satisfying the constraints, or the least-violating one with
    ``converged=False``.
    """
    if int(steps) < 1:
        raise InvalidArgument("steps must be >= 1")
    cfg = cfg or SolverConfig()
    motors = _check_motors(design, motor_angles)
    lo, hi = design.joint_limits
    theta = np.clip(np.asarray(seed.joint_angles, dtype=float), lo, hi)
    phases = 5
    per_phase = max(1, int(steps) // phases)
    mu = 10.0
    best_feasible = None
    least_viol, least_theta = np.inf, theta
    lr = 1.0
    for it in range(int(steps)):
        if it and it % per_phase == 0 and mu < 10.0 ** (1 + phases - 1):
            mu *= 10.0
        value, grad = _penalty_terms(design, theta, motors, mu)
        lr = min(lr * 2.0, 1.0)
        while True:
            cand = np.clip(theta - lr * grad, lo, hi)
            cand_value, _ = _penalty_terms(design, cand, motors, mu)
            if cand_value <= value - 1e-4 * grad @ (theta - cand) or lr < 1e-12:
                break
            lr *= 0.5
        theta = cand
        w = tendon_slack(theta, motors, design)
        viol = abs(float(w.min()))
        if viol <= cfg.constraint_tol:
            # later iterates carry a stiffer penalty, so they sit closer to the face
            best_feasible = theta.copy()
        if viol < least_viol:
            least_viol, least_theta = viol, theta.copy()
    if best_feasible is not None:
        return LocalResult(_state(design, best_feasible, motors), True, int(steps), 0.0)
    return LocalResult(_state(design, least_theta, motors), False, int(steps), least_viol)


def _solve_warm(design, seed, motors, cfg):
    res = solve_budgeted_local(design, seed, motors, cfg.local_max_iters, cfg)
    w = tendon_slack(res.state.joint_angles, motors, design)
    band = max(cfg.constraint_tol, 1e-3 * float(np.abs(w).max()))
    faces = w <= w.min() + band
    theta, _, ok = solve_exact(design, motors, faces=faces)
    if not ok:
        theta, _, ok = solve_exact(design, motors)
        if not ok:
            raise InfeasibleCommand(
                f"motor command {motors.tolist()} is outside the achievable manifold", motors)
    return theta


# ---------------------------------------------------------------------------
# public entry points

def _check_motors(design, motor_angles):
    motors = np.asarray(motor_angles, dtype=float)
    if motors.shape != (design.n_tendons,):
        raise InvalidArgument(f"expected {design.n_tendons} motor angles, got {motors.shape}")
    if not np.all(np.isfinite(motors)):
        raise InvalidArgument("motor angles must be finite")
    return motors


def solve_forward(design, seed, motor_angles, cfg=None):
    """Quasi-static joint angles reached under ``motor_angles``.

    Raises :class:`InfeasibleCommand` when no configuration within the joint
    limits satisfies the slack constraints.
    """
    cfg = cfg or SolverConfig()
    motors = _check_motors(design, motor_angles)
    if seed is None:
        seed = ChainState.zero(design)
    if cfg.mode == "global":
        theta = _solve_global(design, motors, cfg)
    elif cfg.mode == "oracle":
        return _certified(design, brute_force_oracle(design, motors, cfg), cfg)
    else:
        theta = _solve_warm(design, seed, motors, cfg)
    return _certified(design, _state(design, theta, motors), cfg)


def _certified(design, state, cfg):
    _certify(design, state.joint_angles, state.motor_angles, cfg)
    return state


def step(state, action, design, task, cfg=None):
    """One quasi-static transition and its reward."""
    try:
        nxt = solve_forward(design, state, action, cfg)
    except InfeasibleCommand as exc:
        raise InfeasibleCommand(f"{exc} (action {np.asarray(action).tolist()})",
                                np.asarray(action, dtype=float)) from exc
    return nxt, reward(nxt.ee_position, task)


def manifold_map(design, motor_angles, fixed_joints, cfg=None):
    """Constraint satisfaction and stored energy over a joint-space slice.

    ``fixed_joints`` maps 0-based joint indices to pinned angles; the
    remaining one or two joints are swept over ``grid_resolution`` cell
    centers spanning the joint limits.
    """
    cfg = cfg or SolverConfig()
    motors = _check_motors(design, motor_angles)
    n = design.n_joints
    fixed = {int(k): float(v) for k, v in dict(fixed_joints).items()}
    for j in fixed:
        if not 0 <= j < n:
            raise InvalidArgument(f"fixed joint index {j} out of range for {n} joints")
    free = tuple(j for j in range(n) if j not in fixed)
    if len(free) not in (1, 2):
        raise InvalidArgument(f"slice must leave 1 or 2 free joints, leaves {len(free)}")
    ax = grid_axes(design, cfg.grid_resolution)
    axes = [ax.copy() for _ in free]
    mesh = np.meshgrid(*axes, indexing="ij")
    theta = np.empty(mesh[0].shape + (n,))
    for j, v in fixed.items():
        theta[..., j] = v
    for j, mj in zip(free, mesh):
        theta[..., j] = mj
    step_vec = np.zeros(n)
    step_vec[list(free)] = ax[1] - ax[0]
    band = tautness_band(design, step_vec, cfg.constraint_tol)
    satisfied = within_band(tendon_slack(theta, motors, design), band)
    energy = stored_energy(theta, design)
    return ManifoldGrid(axes, satisfied, energy, fixed, free)


def sample_commands(design, count, rng, motor_max=2 * math.pi):
    """Uniform motor commands in ``[0, motor_max]``, projected to be achievable."""
    raw = rng.uniform(0.0, motor_max, size=(count, design.n_tendons))
    return np.array([project_command(design, a)[0] for a in raw])


def benchmark_local_vs_oracle(design, n_actions=100, steps=500, seed=0, cfg=None,
                              motor_max=2 * math.pi):
    """End-effector error of the budgeted local solver against the oracle.

    Both start from the zero state; returns a list of per-action records.
    """
    cfg = cfg or SolverConfig(mode="oracle")
    rng = np.random.default_rng(seed)
    commands = sample_commands(design, n_actions, rng, motor_max)
    start = ChainState.zero(design)
    records = []
    for k, a in enumerate(commands):
        ref = brute_force_oracle(design, a, cfg)
        loc = solve_budgeted_local(design, start, a, steps, cfg)
        records.append({
            "action_index": k,
            "motor_angles": a.tolist(),
            "ee_error": float(np.linalg.norm(loc.state.ee_position - ref.ee_position)),
            "joint_error": float(np.max(np.abs(loc.state.joint_angles - ref.joint_angles))),
            "converged": loc.converged,
        })
    return records


def write_benchmark_csv(records, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["action_index", "motor_angles", "ee_error", "joint_error", "converged"])
        for r in records:
            writer.writerow([r["action_index"], " ".join(repr(x) for x in r["motor_angles"]),
                             repr(r["ee_error"]), repr(r["joint_error"]), int(r["converged"])])


def state_record(state, design):
    return {"joint_angles": state.joint_angles.tolist(),
            "motor_angles": state.motor_angles.tolist(),
            "ee_position": state.ee_position.tolist(),
            "energy": float(stored_energy(state.joint_angles, design)),
            "slack": tendon_slack(state.joint_angles, state.motor_angles, design).tolist()}


def write_state_json(state, design, path):
    with open(path, "w") as fh:
        json.dump(state_record(state, design), fh, indent=2)
