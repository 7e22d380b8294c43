"""Design and control co-optimization through a learned hardware proxy.

Each epoch collects ground-truth rollouts, regresses the proxy onto the
simulator, and improves the policy by backpropagating returns through
the unrolled proxy.  Outside the fixed-design baseline the proxy also
receives the task gradient, which is how "hardware" drifts toward better
task performance; every ``extract_every_n_epochs`` epochs CMA-ES finds
explicit design parameters whose simulated behavior matches the proxy.
"""
from __future__ import annotations

import json
import logging
import math
import os
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from . import nn
from .chain import ChainState, DesignParams, TaskSpec, forward_kinematics, reward
from .cma import CmaConfig, cmaes_minimize
from .errors import InfeasibleCommand, InvalidArgument, TrainingDivergence
from .solver import SolverConfig, project_command, solve_exact_projected, solve_forward

log = logging.getLogger(__name__)

MODES = ("refab", "pretension_only", "multi_goal", "fixed_design_baseline")
PHI_GROUPS = ("flexion_radii", "pretension", "link_lengths")
DEFAULT_GROUPS = {
    "refab": PHI_GROUPS,
    "multi_goal": PHI_GROUPS,
    "pretension_only": ("pretension",),
    "fixed_design_baseline": (),
}


@dataclass(frozen=True)
class TrainConfig:
    alpha: float = 1.0
    epochs: int = 60
    rollouts_per_epoch: int = 4
    horizon: int = 20
    extract_every_n_epochs: int = 10
    proxy_lr: float = 3e-3
    policy_lr: float = 1e-3
    buffer_capacity: int = 2000
    exploration_sigma: float = 0.1
    seed: int = 0
    mode: str = "refab"
    trainable_params: tuple = None
    proxy_steps: int = 200
    policy_steps: int = 20
    batch_size: int = 64
    proxy_gate: float = 1e-3
    gate_min_transitions: int = 200
    grad_clip: float = 100.0
    motor_max: float = 2 * math.pi
    proxy_hidden: tuple = (64, 64)
    policy_hidden: tuple = (64, 64)
    bonus_temperature: float = 1e-3
    radius_bounds: tuple = (0.002, 0.03)
    pretension_bounds: tuple = (0.0, 0.02)
    length_bounds: tuple = (0.2, 1.0)
    cma_sigma: float = 0.1
    cma_max_evals: int = 600
    extract_samples: int = 256
    goal_radius: float = 0.0
    goals_per_update: int = 8
    eval_goals: int = 1
    eval_episodes_per_goal: int = 1
    final_phase_task_grad: bool = False
    model_correction: bool = False
    extraction_check: bool = True

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidArgument(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0:
            raise InvalidArgument("alpha must be >= 0")
        if int(self.extract_every_n_epochs) < 1:
            raise InvalidArgument("extract_every_n_epochs must be >= 1")
        if int(self.horizon) < 1:
            raise InvalidArgument("horizon must be >= 1")
        if int(self.epochs) < 1 or int(self.rollouts_per_epoch) < 1:
            raise InvalidArgument("epochs and rollouts_per_epoch must be >= 1")
        if self.trainable_params is not None:
            bad = set(self.trainable_params) - set(PHI_GROUPS)
            if bad:
                raise InvalidArgument(f"unknown trainable_params {sorted(bad)}")
        for name in ("radius_bounds", "pretension_bounds", "length_bounds"):
            lo, hi = getattr(self, name)
            if not lo < hi:
                raise InvalidArgument(f"{name} needs lo < hi")
            object.__setattr__(self, name, (float(lo), float(hi)))
        object.__setattr__(self, "proxy_hidden", tuple(self.proxy_hidden))
        object.__setattr__(self, "policy_hidden", tuple(self.policy_hidden))
        if self.trainable_params is not None:
            object.__setattr__(self, "trainable_params", tuple(self.trainable_params))

    @property
    def groups(self):
        if self.trainable_params is not None:
            return self.trainable_params
        return DEFAULT_GROUPS[self.mode]

    def replace(self, **kw):
        d = asdict(self)
        d.update(kw)
        return TrainConfig(**d)

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass(frozen=True)
class Transition:
    state: ChainState
    action: np.ndarray
    next_state: ChainState
    reward: float
    goal: tuple
    infeasible_flag: bool
    design_version: int = 0


class ReplayBuffer:
    """FIFO transition store tagged with the design version that produced it."""

    def __init__(self, capacity):
        self.capacity = int(capacity)
        self._items = deque(maxlen=self.capacity)

    def __len__(self):
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def extend(self, transitions):
        self._items.extend(transitions)

    def current(self, version):
        return [t for t in self._items if t.design_version == version]

    def discard_except(self, version):
        kept = self.current(version)
        self._items.clear()
        self._items.extend(kept)


@dataclass
class ExperimentResult:
    final_design: DesignParams
    policy: nn.Network
    proxy: nn.Network
    epoch_returns: list
    mean_distance: float
    std_distance: float
    final_return: float
    metrics: list = field(default_factory=list)
    eval_records: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# design vector <-> DesignParams

def design_to_phi(design):
    return np.concatenate([design.flexion_radii.ravel(), design.pretension, design.link_lengths])


def phi_to_design(template, phi):
    m, n = template.n_tendons, template.n_joints
    phi = np.asarray(phi, dtype=float)
    return template.replace(flexion_radii=phi[:m * n].reshape(m, n),
                            pretension=phi[m * n:m * n + n],
                            link_lengths=phi[m * n + n:])


def phi_mask(design, groups):
    m, n = design.n_tendons, design.n_joints
    parts = {"flexion_radii": m * n, "pretension": n, "link_lengths": n}
    return np.concatenate([np.full(parts[g], g in groups) for g in PHI_GROUPS])


def phi_bounds(design, cfg):
    m, n = design.n_tendons, design.n_joints
    lo = np.concatenate([np.full(m * n, cfg.radius_bounds[0]), np.full(n, cfg.pretension_bounds[0]),
                         np.full(n, cfg.length_bounds[0])])
    hi = np.concatenate([np.full(m * n, cfg.radius_bounds[1]), np.full(n, cfg.pretension_bounds[1]),
                         np.full(n, cfg.length_bounds[1])])
    return lo, hi


# ---------------------------------------------------------------------------
# encodings

class Encoding:
    """Fixed input/output scalings shared by the policy and the proxy.

    Motor angles enter the networks divided by ``motor_max`` and positions
    divided by ``length_scale`` (the mean initial link length); the proxy
    predicts ``[next joint angles, next ee / length_scale]``.
    """

    def __init__(self, design, cfg, with_goal):
        self.n, self.m = design.n_joints, design.n_tendons
        self.motor_max = float(cfg.motor_max)
        self.length_scale = float(np.mean(design.link_lengths))
        self.with_goal = with_goal
        parts = [np.ones(self.n), np.full(self.m, 1 / self.motor_max),
                 np.full(2, 1 / self.length_scale)]
        if with_goal:
            parts.append(np.full(2, 1 / self.length_scale))
        self.state_scale = np.concatenate(parts)
        self.proxy_in_scale = np.concatenate([np.ones(self.n), np.full(self.m, 1 / self.motor_max)])
        self.proxy_out_scale = np.concatenate([np.ones(self.n), np.full(2, 1 / self.length_scale)])

    @property
    def state_size(self):
        return self.state_scale.size

    def policy_input(self, theta, motors, ee, goal):
        parts = [theta, motors, ee] + ([goal] if self.with_goal else [])
        return np.concatenate(parts, axis=-1) * self.state_scale

    def proxy_input(self, theta, motors):
        return np.concatenate([theta, motors], axis=-1) * self.proxy_in_scale

    def proxy_target(self, theta_next, ee_next):
        return np.concatenate([theta_next, ee_next], axis=-1) * self.proxy_out_scale

    def squash(self, z):
        t = np.tanh(z)
        return 0.5 * self.motor_max * (t + 1.0), 0.5 * self.motor_max * (1.0 - t * t)


def make_networks(design, cfg, with_goal):
    enc = Encoding(design, cfg, with_goal)
    io = design.n_joints + design.n_tendons
    proxy = nn.init_network((io,) + cfg.proxy_hidden + (design.n_joints + 2,), "tanh", cfg.seed)
    policy = nn.init_network((enc.state_size,) + cfg.policy_hidden + (design.n_tendons,), "tanh",
                             cfg.seed + 1)
    return enc, proxy, policy


# ---------------------------------------------------------------------------
# ground-truth environment

def env_step(design, state, action, task, solver_cfg):
    """Simulator step with infeasible commands projected toward zero.

    Returns ``(next_state, reward, projected)``.
    """
    applied, projected = project_command(design, action)
    try:
        nxt = solve_forward(design, state, applied, solver_cfg)
    except InfeasibleCommand:
        applied = applied * (1.0 - 1e-9)
        projected = True
        nxt = solve_forward(design, state, applied, solver_cfg)
    if projected:
        log.debug("projected command %s -> %s", np.asarray(action).tolist(), applied.tolist())
    return nxt, reward(nxt.ee_position, task), projected


def _policy_action(policy, enc, state, goal):
    x = enc.policy_input(state.joint_angles, state.motor_angles, state.ee_position,
                         np.asarray(goal, dtype=float))
    z, _ = nn.net_forward(policy, x)
    return enc.squash(z)[0]


def collect_rollouts(design, policy, tasks, cfg, enc, rng, solver_cfg=None, buffer=None,
                     design_version=0):
    """Roll the policy with Gaussian exploration on the simulator.

    Episodes start from the zero state; ``tasks`` supplies one goal per
    episode (cycled).  Transitions are appended to ``buffer`` if given.
    """
    solver_cfg = solver_cfg or SolverConfig()
    out = []
    for ep in range(cfg.rollouts_per_epoch):
        task = tasks[ep % len(tasks)]
        state = ChainState.zero(design)
        for _ in range(cfg.horizon):
            action = _policy_action(policy, enc, state, task.goal)
            if cfg.exploration_sigma > 0:
                action = action + cfg.exploration_sigma * rng.standard_normal(action.shape)
            action = np.clip(action, 0.0, cfg.motor_max)
            nxt, r, projected = env_step(design, state, action, task, solver_cfg)
            out.append(Transition(state, action, nxt, r, task.goal, projected, design_version))
            state = nxt
    if buffer is not None:
        buffer.extend(out)
    return out


def _regression_arrays(transitions, enc):
    x = np.array([enc.proxy_input(t.state.joint_angles, t.action) for t in transitions])
    y = np.array([enc.proxy_target(t.next_state.joint_angles, t.next_state.ee_position)
                  for t in transitions])
    return x, y


def regression_grads(proxy, x, y, alpha):
    """Gradient of ``alpha * mean ||proxy(x) - y||^2`` over the batch."""
    pred, tape = nn.net_forward(proxy, x)
    err = pred - y
    loss = float(np.mean(err * err))
    grads, _ = nn.net_backward(proxy, tape, 2.0 * alpha * err / err.size)
    return alpha * loss, grads


def _check_exploding(grads, clip):
    norm = nn.grad_norm(grads)
    if not math.isfinite(norm) or norm > 100.0 * clip:
        raise TrainingDivergence(f"gradient norm {norm:.3g} exceeds {100 * clip:g}")


def _clipped(grads, clip):
    norm = nn.grad_norm(grads)
    if not math.isfinite(norm):
        raise TrainingDivergence("non-finite gradient")
    if norm > clip:
        grads = [(w * clip / norm, b * clip / norm) for w, b in grads]
    return grads


class Trainer:
    """Owns the authoritative network parameters and their Adam step counters."""

    def __init__(self, proxy, policy):
        self.proxy, self.policy = proxy, policy
        self.proxy_t = 0
        self.policy_t = 0

    def step_proxy(self, grads, lr, clip):
        self.proxy_t += 1
        self.proxy = nn.adam_update(self.proxy, _clipped(grads, clip), lr, self.proxy_t)

    def step_policy(self, grads, lr, clip):
        self.policy_t += 1
        self.policy = nn.adam_update(self.policy, _clipped(grads, clip), lr, self.policy_t)


def train_proxy(trainer, transitions, enc, cfg, rng, steps=None):
    """Minibatch regression of the proxy onto simulator transitions.

    A deterministic 10% of the data is held out.  Returns
    ``(mean_train_loss, heldout_loss)`` (unweighted mean squared error).
    """
    if not transitions:
        raise InvalidArgument("no transitions to train on")
    steps = cfg.proxy_steps if steps is None else steps
    x, y = _regression_arrays(transitions, enc)
    perm = rng.permutation(len(x))
    n_hold = len(x) // 10
    hold, train = perm[:n_hold], perm[n_hold:]
    if len(train) == 0:
        train = hold
    alpha = cfg.alpha if cfg.alpha > 0 else 1.0
    losses = []
    for _ in range(steps):
        idx = rng.choice(train, size=min(cfg.batch_size, len(train)), replace=False)
        loss, grads = regression_grads(trainer.proxy, x[idx], y[idx], alpha)
        if not math.isfinite(loss):
            raise TrainingDivergence("proxy regression loss is not finite")
        trainer.step_proxy(grads, cfg.proxy_lr, cfg.grad_clip)
        losses.append(loss / alpha)
    eval_idx = hold if len(hold) else train
    pred, _ = nn.net_forward(trainer.proxy, x[eval_idx])
    heldout = float(np.mean((pred - y[eval_idx]) ** 2))
    mean_loss = float(np.mean(losses)) if losses else heldout
    if not math.isfinite(heldout):
        raise TrainingDivergence("proxy held-out loss is not finite")
    return mean_loss, heldout


def simulate_policy(design, policy, proxy, enc, goals, start_ee, horizon, motor_max):
    """Deterministic simulator rollout of ``policy`` from the zero state.

    Returns per-step offsets ``(d_theta, d_motor, d_ee)`` between the
    simulator and the proxy evaluated on the simulated inputs, shaped
    ``(horizon, G, .)``.
    """
    g_count = len(goals)
    theta = np.zeros((g_count, enc.n))
    motors = np.zeros((g_count, enc.m))
    ee = np.tile(start_ee, (g_count, 1))
    offsets = ([], [], [])
    for _ in range(horizon):
        z, _ = nn.net_forward(policy, enc.policy_input(theta, motors, ee, goals))
        action = np.clip(enc.squash(z)[0], 0.0, motor_max)
        theta_next, ee_next, applied = solve_exact_projected(design, action)
        out, _ = nn.net_forward(proxy, enc.proxy_input(theta, action))
        offsets[0].append(theta_next - out[:, :enc.n])
        offsets[1].append(applied - action)
        offsets[2].append(ee_next - out[:, enc.n:] / enc.proxy_out_scale[enc.n:])
        theta, motors, ee = theta_next, applied, ee_next
    return tuple(np.array(o) for o in offsets)


def unroll_proxy(policy, proxy, enc, goals, start_ee, horizon, task, temperature, offsets=None):
    """Differentiable return of the policy through the proxy.

    ``goals`` has shape ``(G, 2)``.  ``offsets`` (from
    :func:`simulate_policy`) are added as constants to each proxy step so
    the unrolled trajectory matches the simulator while gradients still
    flow through the proxy.  Returns ``(mean_return, policy_grads,
    proxy_grads)`` where the gradients are of the *negative* mean return.
    """
    g_count = len(goals)
    n, m = enc.n, enc.m
    theta = np.zeros((g_count, n))
    motors = np.zeros((g_count, m))
    ee = np.tile(start_ee, (g_count, 1))
    tapes = []
    total = np.zeros(g_count)
    for t in range(horizon):
        x = enc.policy_input(theta, motors, ee, goals)
        z, ptape = nn.net_forward(policy, x)
        action, dsquash = enc.squash(z)
        out, qtape = nn.net_forward(proxy, enc.proxy_input(theta, action))
        theta_next = out[:, :n]
        ee_next = out[:, n:] / enc.proxy_out_scale[n:]
        motors_next = action
        if offsets is not None:
            theta_next = theta_next + offsets[0][t]
            motors_next = action + offsets[1][t]
            ee_next = ee_next + offsets[2][t]
        diff = ee_next - goals
        dist = np.sqrt(np.sum(diff * diff, axis=1))
        gate = expit((task.bonus_threshold - dist) / temperature)
        total += -dist ** 2 + task.bonus * gate
        # d reward / d ee
        dgate = gate * (1 - gate) / temperature
        safe = np.where(dist > 0, dist, 1.0)
        dr_dee = -2.0 * diff - (task.bonus * dgate / safe)[:, None] * diff
        tapes.append((ptape, qtape, dsquash, dr_dee))
        theta, motors, ee = theta_next, motors_next, ee_next

    pol_grads = nn.zero_grads(policy)
    prox_grads = nn.zero_grads(proxy)
    g_theta = np.zeros((g_count, n))
    g_motor = np.zeros((g_count, m))
    g_ee = np.zeros((g_count, 2))
    scale = -1.0 / g_count
    for ptape, qtape, dsquash, dr_dee in reversed(tapes):
        g_out = np.concatenate([g_theta, (g_ee + dr_dee) / enc.proxy_out_scale[n:]], axis=1)
        qg, g_in = nn.net_backward(proxy, qtape, g_out)
        prox_grads = nn.add_grads(prox_grads, qg, scale)
        g_in = g_in * enc.proxy_in_scale
        g_action = g_in[:, n:] + g_motor
        pg, g_x = nn.net_backward(policy, ptape, g_action * dsquash)
        pol_grads = nn.add_grads(pol_grads, pg, scale)
        g_s = g_x * enc.state_scale
        g_theta = g_in[:, :n] + g_s[:, :n]
        g_motor = g_s[:, n:n + m]
        g_ee = g_s[:, n + m:n + m + 2]
    return float(np.mean(total)), pol_grads, prox_grads


def policy_update(trainer, enc, goals, start_ee, task, cfg, transitions, rng, steps=None,
                  train_proxy_with_task=True, horizon=None, design=None):
    """Gradient ascent on the proxy-unrolled return.

    The policy always moves; the proxy moves too when
    ``train_proxy_with_task`` is set, with the task gradient added to the
    ``alpha``-weighted regression gradient on a fresh minibatch.  When
    ``design`` is given and ``cfg.model_correction`` is set, each step
    anchors the unroll to a simulator rollout of the current policy.
    Returns the mean estimated return over the steps.
    """
    steps = cfg.policy_steps if steps is None else steps
    horizon = cfg.horizon if horizon is None else int(horizon)
    if horizon == 0 or steps == 0:
        return 0.0
    goals = np.atleast_2d(np.asarray(goals, dtype=float))
    x = y = None
    if train_proxy_with_task and transitions:
        x, y = _regression_arrays(transitions, enc)
    returns = []
    for _ in range(steps):
        offsets = None
        if design is not None and cfg.model_correction:
            offsets = simulate_policy(design, trainer.policy, trainer.proxy, enc, goals,
                                      start_ee, horizon, cfg.motor_max)
        ret, pg, qg = unroll_proxy(trainer.policy, trainer.proxy, enc, goals, start_ee,
                                   horizon, task, cfg.bonus_temperature, offsets)
        if not math.isfinite(ret):
            raise TrainingDivergence("estimated return is not finite")
        returns.append(ret)
        # the explosion check covers task gradients only, not the alpha-weighted regression
        _check_exploding(pg, cfg.grad_clip)
        trainer.step_policy(pg, cfg.policy_lr, cfg.grad_clip)
        if train_proxy_with_task:
            _check_exploding(qg, cfg.grad_clip)
            if x is not None and cfg.alpha > 0:
                idx = rng.choice(len(x), size=min(cfg.batch_size, len(x)), replace=False)
                _, rg = regression_grads(trainer.proxy, x[idx], y[idx], cfg.alpha)
                qg = nn.add_grads(qg, rg)
            trainer.step_proxy(qg, cfg.proxy_lr, cfg.grad_clip)
    return float(np.mean(returns))


# ---------------------------------------------------------------------------
# hardware extraction

def extraction_loss(proxy, enc, x, design):
    """Mean squared mismatch between proxy predictions and the simulator
    under ``design`` on proxy inputs ``x``."""
    pred, _ = nn.net_forward(proxy, x)
    return _mismatch(pred, x, enc, design)


def _mismatch(pred, x, enc, design):
    motors = x[:, enc.n:] / enc.proxy_in_scale[enc.n:]
    theta, ee, _ = solve_exact_projected(design, motors)
    err = pred - enc.proxy_target(theta, ee)
    return float(np.mean(err * err))


def extract_hardware(proxy, transitions, current, cfg, enc, groups=None, seed=0,
                     max_evals=None, sigma=None):
    """CMA-ES search over the trainable design entries for the design whose
    simulated transitions best match the proxy on the buffered inputs.

    Returns ``(design, cma_result)``; the current design is kept when the
    search fails to improve on it.
    """
    groups = cfg.groups if groups is None else groups
    mask = phi_mask(current, groups)
    phi0 = design_to_phi(current)
    if not mask.any():
        return current, None
    if len(transitions) < 100:
        raise InvalidArgument(f"extraction needs >= 100 transitions, got {len(transitions)}")
    x, _ = _regression_arrays(transitions, enc)
    rng = np.random.default_rng([seed, 7])
    if len(x) > cfg.extract_samples:
        x = x[np.sort(rng.choice(len(x), cfg.extract_samples, replace=False))]
    pred, _ = nn.net_forward(proxy, x)
    lo, hi = phi_bounds(current, cfg)
    lo_t, hi_t = lo[mask], hi[mask]
    span = hi_t - lo_t

    def decode(u):
        phi = phi0.copy()
        phi[mask] = lo_t + np.clip(u, 0.0, 1.0) * span
        return phi_to_design(current, phi)

    def objective(u):
        return _mismatch(pred, x, enc, decode(u))

    u0 = np.clip((phi0[mask] - lo_t) / span, 0.0, 1.0)
    cma_cfg = CmaConfig(initial_sigma=cfg.cma_sigma if sigma is None else sigma,
                        max_evals=cfg.cma_max_evals if max_evals is None else max_evals,
                        bounds=(np.zeros(mask.sum()), np.ones(mask.sum())), seed=seed)
    res = cmaes_minimize(objective, u0, cma_cfg)
    if not res.converged:
        log.info("CMA-ES stopped at its evaluation budget (best %.3e)", res.best_f)
    if res.best_f >= objective(u0):
        log.warning("hardware extraction did not improve the fit; keeping current design")
        return current, res
    return decode(res.best_x), res


# ---------------------------------------------------------------------------
# evaluation and the outer loop

def eval_policy(design, policy, goals, episodes_per_goal, cfg, enc, solver_cfg=None, task=None):
    """Exploration-free rollouts on the simulator.

    Returns ``(mean_distance, std_distance, records)`` over final
    end-effector distances to each goal.
    """
    solver_cfg = solver_cfg or SolverConfig()
    records = []
    for goal in goals:
        t = TaskSpec(goal=goal, bonus=task.bonus if task else 0.01,
                     bonus_threshold=task.bonus_threshold if task else 0.002,
                     horizon=cfg.horizon)
        for ep in range(episodes_per_goal):
            state = ChainState.zero(design)
            ret, projections = 0.0, 0
            for _ in range(cfg.horizon):
                action = np.clip(_policy_action(policy, enc, state, t.goal), 0.0, cfg.motor_max)
                state, r, projected = env_step(design, state, action, t, solver_cfg)
                ret += r
                projections += int(projected)
            dist = float(np.linalg.norm(state.ee_position - np.asarray(t.goal)))
            records.append({"goal": list(t.goal), "episode": ep, "distance": dist,
                            "return": ret, "projections": projections})
    d = np.array([r["distance"] for r in records])
    return float(d.mean()), float(d.std()), records


def _training_goals(tasks, cfg, rng, count):
    if cfg.goal_radius > 0:
        center = np.asarray(tasks[0].goal)
        r = cfg.goal_radius * np.sqrt(rng.uniform(size=count))
        a = rng.uniform(0, 2 * math.pi, size=count)
        return center + np.stack([r * np.cos(a), r * np.sin(a)], axis=1)
    g = np.array([t.goal for t in tasks], dtype=float)
    return g[np.arange(count) % len(g)]


def _as_tasks(goals, template, cfg):
    return [TaskSpec(goal=tuple(g), bonus=template.bonus,
                     bonus_threshold=template.bonus_threshold, horizon=cfg.horizon) for g in goals]


def _fmt(x):
    return float(f"{x:.12g}")


def _improves(new, old, policy, tasks, cfg, enc, solver_cfg, template, multi):
    """True when the current policy earns a strictly higher simulated
    return on ``new`` than on ``old``."""
    goals = [t.goal for t in tasks[:1]] if multi else [t.goal for t in tasks]
    returns = []
    for design in (new, old):
        _, _, records = eval_policy(design, policy, goals, 1, cfg, enc, solver_cfg, template)
        returns.append(np.mean([r["return"] for r in records]))
    return returns[0] > returns[1]


def morph_loop(cfg, initial_design, tasks, solver_cfg=None, output_dir=None, networks=None):
    """Alternate rollouts, proxy regression, policy improvement and periodic
    hardware extraction.

    Extraction runs after epoch ``e`` when ``(e + 1)`` is a multiple of
    ``extract_every_n_epochs`` and at least that many epochs remain, so the
    policy always finishes on the final design.  Metrics are appended to
    ``output_dir/metrics.jsonl`` and checkpoints rewritten every epoch.
    """
    solver_cfg = solver_cfg or SolverConfig()
    tasks = list(tasks)
    if not tasks:
        raise InvalidArgument("at least one task is required")
    multi = cfg.mode == "multi_goal"
    enc, proxy, policy = make_networks(initial_design, cfg, multi)
    if networks is not None:
        proxy, policy = networks
    trainer = Trainer(proxy, policy)
    buffer = ReplayBuffer(cfg.buffer_capacity)
    design, version = initial_design, 0
    mask = phi_mask(initial_design, cfg.groups)
    co_design = cfg.mode != "fixed_design_baseline"
    template = tasks[0]
    metrics, epoch_returns = [], []
    log_path = None
    if output_dir is not None:
        os.makedirs(output_dir, exist_ok=True)
        log_path = os.path.join(output_dir, "metrics.jsonl")
        open(log_path, "w").close()

    every = cfg.extract_every_n_epochs

    def extractions_left(epoch):
        return epoch < ((cfg.epochs - every) // every) * every

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        goals = _training_goals(tasks, cfg, rng, cfg.rollouts_per_epoch if multi else len(tasks))
        ep_tasks = _as_tasks(goals, template, cfg)
        fresh = collect_rollouts(design, trainer.policy, ep_tasks, cfg, enc, rng, solver_cfg,
                                 buffer, version)
        mean_return = float(np.sum([t.reward for t in fresh]) / cfg.rollouts_per_epoch)
        epoch_returns.append(mean_return)
        data = buffer.current(version)
        loss, heldout = train_proxy(trainer, data, enc, cfg, rng)
        gated = heldout > cfg.proxy_gate or len(data) < cfg.gate_min_transitions
        est_return = None
        if not gated:
            upd_goals = (_training_goals(tasks, cfg, rng, cfg.goals_per_update) if multi
                         else np.array([t.goal for t in tasks]))
            start_ee = forward_kinematics(np.zeros(design.n_joints), design.link_lengths)[1]
            # once no extraction is left the proxy only needs to be accurate
            task_grad = co_design and (cfg.final_phase_task_grad or extractions_left(epoch))
            est_return = policy_update(trainer, enc, upd_goals, start_ee, template, cfg, data, rng,
                                       train_proxy_with_task=task_grad, design=design)
        extracted = False
        remaining = cfg.epochs - epoch - 1
        if (co_design and not gated and (epoch + 1) % cfg.extract_every_n_epochs == 0
                and remaining >= cfg.extract_every_n_epochs and len(data) >= 100):
            new_design, _ = extract_hardware(trainer.proxy, data, design, cfg, enc,
                                             seed=cfg.seed * 1000 + epoch)
            frozen = design_to_phi(design)[~mask]
            assert np.array_equal(design_to_phi(new_design)[~mask], frozen)
            if (new_design != design and cfg.extraction_check
                    and not _improves(new_design, design, trainer.policy, tasks, cfg, enc,
                                      solver_cfg, template, multi)):
                log.info("epoch %d: extracted design does not improve the policy; kept", epoch)
                new_design = design
            if new_design != design:
                design, version = new_design, version + 1
                buffer.discard_except(version)
                extracted = True
        probe_goals = [t.goal for t in tasks[:1]] if multi else [t.goal for t in tasks]
        probe, _, _ = eval_policy(design, trainer.policy, probe_goals, 1, cfg, enc, solver_cfg,
                                  template)
        record = {"epoch": epoch, "mean_return": _fmt(mean_return), "proxy_loss": _fmt(loss),
                  "eval_distance": _fmt(probe),
                  "heldout_loss": _fmt(heldout), "gated": gated,
                  "estimated_return": None if est_return is None else _fmt(est_return),
                  "extracted": extracted, "design_version": version,
                  "phi": [_fmt(v) for v in design_to_phi(design)]}
        metrics.append(record)
        if log_path is not None:
            with open(log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")
            _checkpoint(output_dir, design, trainer)

    if multi:
        erng = np.random.default_rng([cfg.seed, 10 ** 6])
        eval_goals = _training_goals(tasks, cfg, erng, cfg.eval_goals)
    else:
        eval_goals = [t.goal for t in tasks]
    mean_d, std_d, records = eval_policy(design, trainer.policy, eval_goals,
                                         cfg.eval_episodes_per_goal, cfg, enc, solver_cfg, template)
    final_return = float(np.mean([r["return"] for r in records]))
    return ExperimentResult(design, trainer.policy, trainer.proxy, epoch_returns, mean_d, std_d,
                            final_return, metrics, records)


def _checkpoint(output_dir, design, trainer):
    design.to_json(os.path.join(output_dir, "design.json"))
    nn.save(trainer.policy, os.path.join(output_dir, "policy.json"))
    nn.save(trainer.proxy, os.path.join(output_dir, "proxy.json"))
