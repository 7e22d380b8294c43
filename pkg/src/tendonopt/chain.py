"""Planar tendon-driven chain: design parameters, kinematics and the
closed-form quantities of the transmission model.

Joint angles are measured counter-clockwise relative to the previous
link; the base sits at the origin with the unflexed chain along +x.
Every function accepts leading batch dimensions on the angle arguments.
"""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument

DEFAULT_TOL = 1e-6

# reference initial hardware (meters)
INITIAL_FLEXION_RADII = ((0.005, 0.005, 0.005), (0.005, 0.01, 0.02))
INITIAL_LINK_LENGTHS = (0.8, 0.8, 0.8)
INITIAL_PRETENSION = (0.0, 0.0, 0.0)
INITIAL_EXTENSION_RADIUS = 0.015


def _frozen(a, ndim, name):
    arr = np.array(a, dtype=float)
    if arr.ndim != ndim:
        raise InvalidArgument(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DesignParams:
    """Hardware parameters of an N-joint, M-tendon chain (SI units)."""

    flexion_radii: np.ndarray
    winch_radii: np.ndarray = None
    extension_radius: float = INITIAL_EXTENSION_RADIUS
    pretension: np.ndarray = None
    link_lengths: np.ndarray = None
    spring_k: float = 100.0
    joint_limits: tuple = (0.0, math.pi / 2)

    def __post_init__(self):
        rf = _frozen(self.flexion_radii, 2, "flexion_radii")
        m, n = rf.shape
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("flexion_radii", rf)
        set_("winch_radii", _frozen(
            np.full(m, 0.01) if self.winch_radii is None else self.winch_radii, 1, "winch_radii"))
        set_("pretension", _frozen(
            np.zeros(n) if self.pretension is None else self.pretension, 1, "pretension"))
        set_("link_lengths", _frozen(
            np.full(n, 0.8) if self.link_lengths is None else self.link_lengths, 1, "link_lengths"))
        set_("extension_radius", float(self.extension_radius))
        set_("spring_k", float(self.spring_k))
        lo, hi = (float(v) for v in self.joint_limits)
        set_("joint_limits", (lo, hi))
        self.validate()

    def validate(self):
        m, n = self.flexion_radii.shape
        if m < 1 or n < 1:
            raise InvalidArgument("flexion_radii must have at least one row and column")
        if not np.all(np.isfinite(self.flexion_radii)) or np.any(self.flexion_radii <= 0):
            raise InvalidArgument("flexion_radii must be finite and > 0")
        if self.winch_radii.shape != (m,) or np.any(~(self.winch_radii > 0)):
            raise InvalidArgument(f"winch_radii must be {m} positive values")
        if self.pretension.shape != (n,) or np.any(~(self.pretension >= 0)):
            raise InvalidArgument(f"pretension must be {n} values >= 0")
        if self.link_lengths.shape != (n,) or np.any(~(self.link_lengths > 0)):
            raise InvalidArgument(f"link_lengths must be {n} positive values")
        if not self.extension_radius > 0:
            raise InvalidArgument("extension_radius must be > 0")
        if not self.spring_k > 0:
            raise InvalidArgument("spring_k must be > 0")
        lo, hi = self.joint_limits
        if not (math.isfinite(lo) and math.isfinite(hi) and lo <= 0.0 <= hi and lo < hi):
            raise InvalidArgument(f"joint_limits must satisfy lo <= 0 <= hi, got {self.joint_limits}")

    @property
    def n_joints(self):
        return self.flexion_radii.shape[1]

    @property
    def n_tendons(self):
        return self.flexion_radii.shape[0]

    @classmethod
    def paper_initial(cls, **overrides):
        kw = dict(flexion_radii=INITIAL_FLEXION_RADII, link_lengths=INITIAL_LINK_LENGTHS,
                  pretension=INITIAL_PRETENSION)
        kw.update(overrides)
        return cls(**kw)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_dict(self):
        return {
            "flexion_radii": self.flexion_radii.tolist(),
            "winch_radii": self.winch_radii.tolist(),
            "extension_radius": self.extension_radius,
            "pretension": self.pretension.tolist(),
            "link_lengths": self.link_lengths.tolist(),
            "spring_k": self.spring_k,
            "joint_limits": list(self.joint_limits),
        }

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown DesignParams keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def __eq__(self, other):
        if not isinstance(other, DesignParams):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


@dataclass(frozen=True)
class ChainState:
    joint_angles: np.ndarray
    motor_angles: np.ndarray
    ee_position: np.ndarray

    def __post_init__(self):
        for name in ("joint_angles", "motor_angles", "ee_position"):
            object.__setattr__(self, name, _frozen(getattr(self, name), 1, name))

    @classmethod
    def from_joints(cls, design, joint_angles, motor_angles=None):
        """Build a state whose end-effector is consistent with `design`."""
        theta = np.asarray(joint_angles, dtype=float)
        if motor_angles is None:
            motor_angles = np.zeros(design.n_tendons)
        _, ee = forward_kinematics(theta, design.link_lengths)
        return cls(theta, motor_angles, ee)

    @classmethod
    def zero(cls, design):
        return cls.from_joints(design, np.zeros(design.n_joints))

    def check(self, design, atol=1e-9):
        """Raise InvalidArgument unless the state is valid under `design`."""
        lo, hi = design.joint_limits
        if self.joint_angles.shape != (design.n_joints,):
            raise InvalidArgument("joint_angles length does not match design")
        if self.motor_angles.shape != (design.n_tendons,):
            raise InvalidArgument("motor_angles length does not match design")
        if np.any(self.joint_angles < lo - atol) or np.any(self.joint_angles > hi + atol):
            raise InvalidArgument("joint_angles outside joint limits")
        _, ee = forward_kinematics(self.joint_angles, design.link_lengths)
        if np.max(np.abs(ee - self.ee_position)) > atol:
            raise InvalidArgument("ee_position inconsistent with forward kinematics")

    def vector(self):
        return np.concatenate([self.joint_angles, self.motor_angles, self.ee_position])

    def to_dict(self):
        return {"joint_angles": self.joint_angles.tolist(),
                "motor_angles": self.motor_angles.tolist(),
                "ee_position": self.ee_position.tolist()}


@dataclass(frozen=True)
class TaskSpec:
    goal: tuple
    bonus: float = 0.01
    bonus_threshold: float = 0.002
    horizon: int = 20

    def __post_init__(self):
        goal = tuple(float(g) for g in self.goal)
        if len(goal) != 2:
            raise InvalidArgument("goal must be a 2D point")
        object.__setattr__(self, "goal", goal)
        if not self.bonus_threshold > 0:
            raise InvalidArgument("bonus_threshold must be > 0")
        if int(self.horizon) < 1:
            raise InvalidArgument("horizon must be >= 1")
        object.__setattr__(self, "horizon", int(self.horizon))

    def to_dict(self):
        return {"goal": list(self.goal), "bonus": self.bonus,
                "bonus_threshold": self.bonus_threshold, "horizon": self.horizon}

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise InvalidArgument(f"unknown TaskSpec keys: {sorted(unknown)}")
        return cls(**d)


def forward_kinematics(joint_angles, link_lengths):
    """Planar serial-chain kinematics.

    Returns ``(joint_positions, ee_position)`` where ``joint_positions`` has
    shape ``(..., N + 1, 2)`` starting at the origin.
    """
    theta = np.asarray(joint_angles, dtype=float)
    lengths = np.asarray(link_lengths, dtype=float)
    if theta.shape[-1:] != lengths.shape:
        raise InvalidArgument(f"{theta.shape[-1]} joint angles for {lengths.shape[0]} links")
    phi = np.cumsum(theta, axis=-1)
    steps = np.stack([lengths * np.cos(phi), lengths * np.sin(phi)], axis=-1)
    origin = np.zeros(theta.shape[:-1] + (1, 2))
    positions = np.concatenate([origin, np.cumsum(steps, axis=-2)], axis=-2)
    return positions, positions[..., -1, :]


def _check_joints(theta, design):
    theta = np.asarray(theta, dtype=float)
    if theta.shape[-1:] != (design.n_joints,):
        raise InvalidArgument(f"expected {design.n_joints} joint angles, got shape {theta.shape}")
    return theta


def tendon_slack(joint_angles, motor_angles, design):
    """Slack per tendon: ``R^F @ theta_J - diag(R^A) @ theta_A``."""
    theta = _check_joints(joint_angles, design)
    motors = np.asarray(motor_angles, dtype=float)
    if motors.shape[-1:] != (design.n_tendons,):
        raise InvalidArgument(f"expected {design.n_tendons} motor angles, got shape {motors.shape}")
    return theta @ design.flexion_radii.T - design.winch_radii * motors


def elastic_elongation(joint_angles, design):
    theta = _check_joints(joint_angles, design)
    return design.extension_radius * theta + design.pretension


def stored_energy(joint_angles, design):
    dl = elastic_elongation(joint_angles, design)
    return 0.5 * design.spring_k * np.sum(dl * dl, axis=-1)


def constraints_satisfied(slack, tol=DEFAULT_TOL):
    """All slacks non-negative and at least one tendon taut, within `tol`."""
    w = np.asarray(slack, dtype=float)
    if w.size == 0:
        raise InvalidArgument("empty slack vector")
    if not tol > 0:
        raise InvalidArgument("tol must be > 0")
    wmin = float(np.min(w))
    return bool(-tol <= wmin <= tol)


def reward(ee, task):
    """Negative squared goal distance plus the completion bonus."""
    d = np.asarray(ee, dtype=float) - np.asarray(task.goal)
    dist2 = float(d @ d)
    bonus = task.bonus if math.sqrt(dist2) < task.bonus_threshold else 0.0
    return -dist2 + bonus
