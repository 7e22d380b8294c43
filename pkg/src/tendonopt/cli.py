"""Command-line entry point.

Every subcommand reads one strict JSON config, writes the fully resolved
config to ``<out>/config.resolved.json`` before doing any work, and then
writes its results next to it.  Failures print one diagnostic line to
stderr followed by a one-line JSON error record (also saved as
``error.json`` when the output directory exists) and exit nonzero.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import os
import re
import sys
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .chain import ChainState, DesignParams, TaskSpec
from .cma import CmaResult
from .cooptim import (
    Encoding,
    TrainConfig,
    Transition,
    eval_policy,
    extract_hardware,
    morph_loop,
)
from .errors import ConfigError, InfeasibleCommand, InvalidArgument, OptimizerAbort, TrainingDivergence
from .solver import (
    SolverConfig,
    benchmark_local_vs_oracle,
    manifold_map,
    sample_commands,
    solve_exact_projected,
    solve_forward,
    write_benchmark_csv,
    write_state_json,
)

log = logging.getLogger("tendonopt")

COMMANDS = ("solve", "manifold", "benchmark-solver", "train", "eval", "extract")
DEFAULT_OUT = "tendonopt-out"
# the figure protocol pins the second joint
DEFAULT_SLICE = {"1": 0.0}
BENCHMARK_DEFAULTS = {"n_actions": 100, "steps": 500, "motor_max": 2 * math.pi}

TOP_KEYS = ("seed", "output_dir", "design", "design_path", "goal", "goals", "bonus",
            "bonus_threshold", "solver", "train", "motor_angles", "fixed_joints", "benchmark",
            "policy_path", "proxy_path", "eval_episodes", "extract_samples")
DESIGN_KEYS = tuple(f.name for f in dataclasses.fields(DesignParams))
SOLVER_KEYS = tuple(f.name for f in dataclasses.fields(SolverConfig))
TRAIN_KEYS = tuple(f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed")


@dataclass
class ExperimentConfig:
    design: DesignParams
    tasks: list
    solver: SolverConfig
    train: TrainConfig
    output_dir: str
    seed: int
    design_path: str = None
    motor_angles: np.ndarray = None
    fixed_joints: dict = field(default_factory=dict)
    benchmark: dict = field(default_factory=dict)
    policy_path: str = None
    proxy_path: str = None
    eval_episodes: int = 1
    extract_samples: int = 256
    bonus: float = 0.01
    bonus_threshold: float = 0.002

    def resolved(self):
        """Plain-JSON echo that parses back to the same config."""
        return {
            "seed": self.seed,
            "output_dir": self.output_dir,
            "design": self.design.to_dict(),
            "design_path": self.design_path,
            "goals": [list(t.goal) for t in self.tasks] or None,
            "bonus": self.bonus,
            "bonus_threshold": self.bonus_threshold,
            "solver": self.solver.to_dict(),
            "train": {k: v for k, v in self.train.to_dict().items() if k != "seed"},
            "motor_angles": self.motor_angles.tolist(),
            "fixed_joints": {str(k): v for k, v in self.fixed_joints.items()},
            "benchmark": dict(self.benchmark),
            "policy_path": self.policy_path,
            "proxy_path": self.proxy_path,
            "eval_episodes": self.eval_episodes,
            "extract_samples": self.extract_samples,
        }


def _line_of(text, key):
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _check_keys(section, allowed, text, where):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a JSON object", where, _line_of(text, where))
    for key in section:
        if key not in allowed:
            raise ConfigError(f"unknown key {key!r} in {where}", key, _line_of(text, key))


def _build(kind, section, keys, text, **extra):
    """Construct a config dataclass, attributing failures to a key."""
    try:
        return kind(**section, **extra)
    except (InvalidArgument, TypeError, ValueError) as exc:
        msg = str(exc)
        key = next((k for k in keys if k in msg), None) or next(iter(section), kind.__name__)
        raise ConfigError(f"{kind.__name__}: {msg}", key, _line_of(text, key)) from exc


def parse_config(path, seed=None, output_dir=None, design_path=None):
    """Read and validate a JSON config; command-line overrides win."""
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", "config") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON: {exc.msg}", "config", exc.lineno) from exc
    _check_keys(raw, TOP_KEYS, text, "config")

    if seed is None:
        seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError(f"seed must be a non-negative integer, got {seed!r}", "seed",
                          _line_of(text, "seed"))

    design_path = design_path or raw.get("design_path")
    section = raw.get("design", {})
    _check_keys(section, DESIGN_KEYS, text, "design")
    if design_path:
        try:
            base = DesignParams.from_json(design_path).to_dict()
        except (OSError, InvalidArgument, ValueError) as exc:
            raise ConfigError(f"cannot load design from {design_path}: {exc}", "design_path",
                              _line_of(text, "design_path")) from exc
        design = _build(DesignParams, {**base, **section}, DESIGN_KEYS, text)
    else:
        design = _initial_design(section, text)

    solver_section = raw.get("solver", {})
    _check_keys(solver_section, SOLVER_KEYS, text, "solver")
    solver = _build(SolverConfig, solver_section, SOLVER_KEYS, text)

    train_section = raw.get("train", {})
    _check_keys(train_section, TRAIN_KEYS, text, "train")
    train = _build(TrainConfig, train_section, TRAIN_KEYS, text, seed=seed)

    goals = raw.get("goals")
    if "goal" in raw:
        if goals is not None:
            raise ConfigError("give either goal or goals, not both", "goal", _line_of(text, "goal"))
        goals = [raw["goal"]]
    bonus = raw.get("bonus", 0.01)
    threshold = raw.get("bonus_threshold", 0.002)
    tasks = []
    for g in goals or []:
        try:
            tasks.append(TaskSpec(goal=tuple(g), bonus=bonus, bonus_threshold=threshold,
                                  horizon=train.horizon))
        except (InvalidArgument, TypeError, ValueError) as exc:
            key = "goal" if "goal" in raw else "goals"
            raise ConfigError(f"bad task: {exc}", key, _line_of(text, key)) from exc

    motors = raw.get("motor_angles")
    motors = np.zeros(design.n_tendons) if motors is None else np.asarray(motors, dtype=float)
    if motors.shape != (design.n_tendons,) or not np.all(np.isfinite(motors)):
        raise ConfigError(f"motor_angles must be {design.n_tendons} finite values",
                          "motor_angles", _line_of(text, "motor_angles"))

    fixed_raw = raw.get("fixed_joints", DEFAULT_SLICE)
    try:
        fixed = {int(k): float(v) for k, v in dict(fixed_raw).items()}
    except (TypeError, ValueError) as exc:
        raise ConfigError("fixed_joints must map joint indices to angles", "fixed_joints",
                          _line_of(text, "fixed_joints")) from exc

    bench = dict(BENCHMARK_DEFAULTS)
    bench_section = raw.get("benchmark", {})
    _check_keys(bench_section, tuple(BENCHMARK_DEFAULTS), text, "benchmark")
    bench.update(bench_section)
    for key in ("n_actions", "steps"):
        if not isinstance(bench[key], int) or bench[key] < 1:
            raise ConfigError(f"benchmark.{key} must be a positive integer", key,
                              _line_of(text, key))

    for key in ("eval_episodes", "extract_samples"):
        value = raw.get(key, 1 if key == "eval_episodes" else 256)
        if not isinstance(value, int) or value < 1:
            raise ConfigError(f"{key} must be a positive integer", key, _line_of(text, key))

    return ExperimentConfig(
        design=design, tasks=tasks, solver=solver, train=train,
        output_dir=output_dir or raw.get("output_dir") or DEFAULT_OUT, seed=seed,
        design_path=design_path, motor_angles=motors, fixed_joints=fixed, benchmark=bench,
        policy_path=raw.get("policy_path"), proxy_path=raw.get("proxy_path"),
        eval_episodes=raw.get("eval_episodes", 1), extract_samples=raw.get("extract_samples", 256),
        bonus=bonus, bonus_threshold=threshold)


def _initial_design(section, text):
    try:
        return DesignParams.paper_initial(**section)
    except (InvalidArgument, TypeError, ValueError) as exc:
        msg = str(exc)
        key = next((k for k in DESIGN_KEYS if k in msg), None) or next(iter(section), "design")
        raise ConfigError(f"DesignParams: {msg}", key, _line_of(text, key)) from exc


# ---------------------------------------------------------------------------
# subcommands

def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _need(cfg, attr, key):
    value = getattr(cfg, attr)
    if not value:
        raise ConfigError(f"this command needs {key} in the config", key)
    return value


def cmd_solve(cfg):
    state = solve_forward(cfg.design, None, cfg.motor_angles, cfg.solver)
    path = os.path.join(cfg.output_dir, "solve.json")
    write_state_json(state, cfg.design, path)
    return path


def cmd_manifold(cfg):
    grid = manifold_map(cfg.design, cfg.motor_angles, cfg.fixed_joints, cfg.solver)
    path = os.path.join(cfg.output_dir, "manifold.csv")
    grid.to_csv(path)
    return path


def cmd_benchmark(cfg):
    b = cfg.benchmark
    records = benchmark_local_vs_oracle(cfg.design, b["n_actions"], b["steps"], cfg.seed,
                                        cfg.solver.replace(mode="oracle"), b["motor_max"])
    path = os.path.join(cfg.output_dir, "benchmark.csv")
    write_benchmark_csv(records, path)
    errors = [r["ee_error"] for r in records]
    _write_json(os.path.join(cfg.output_dir, "benchmark_summary.json"),
                {"mean_ee_error": float(np.mean(errors)), "max_ee_error": float(np.max(errors)),
                 "converged": int(sum(r["converged"] for r in records)),
                 "n_actions": len(records)})
    return path


def cmd_train(cfg):
    tasks = _need(cfg, "tasks", "goal")
    res = morph_loop(cfg.train, cfg.design, tasks, cfg.solver, cfg.output_dir)
    _write_json(os.path.join(cfg.output_dir, "result.json"), {
        "mean_distance": res.mean_distance, "std_distance": res.std_distance,
        "final_return": res.final_return, "final_design": res.final_design.to_dict(),
        "eval_records": res.eval_records})
    return os.path.join(cfg.output_dir, "metrics.jsonl")


def cmd_eval(cfg):
    tasks = _need(cfg, "tasks", "goal")
    policy = nn.load(_need(cfg, "policy_path", "policy_path"))
    multi = policy.layer_sizes[0] == Encoding(cfg.design, cfg.train, True).state_size
    enc = Encoding(cfg.design, cfg.train, multi)
    mean, std, records = eval_policy(cfg.design, policy, [t.goal for t in tasks],
                                     cfg.eval_episodes, cfg.train, enc, cfg.solver, tasks[0])
    path = os.path.join(cfg.output_dir, "eval.json")
    _write_json(path, {"mean_distance": mean, "std_distance": std, "records": records})
    return path


def cmd_extract(cfg):
    """Fit the design to a saved proxy on random commands from the zero state."""
    proxy = nn.load(_need(cfg, "proxy_path", "proxy_path"))
    enc = Encoding(cfg.design, cfg.train, False)
    rng = np.random.default_rng([cfg.seed, 3])
    cmds = sample_commands(cfg.design, cfg.extract_samples, rng, cfg.train.motor_max)
    theta, _, applied = solve_exact_projected(cfg.design, cmds)
    zero = ChainState.zero(cfg.design)
    data = [Transition(zero, a, ChainState.from_joints(cfg.design, t, a), 0.0, (0.0, 0.0), False)
            for a, t in zip(applied, theta)]
    design, res = extract_hardware(proxy, data, cfg.design, cfg.train, enc, seed=cfg.seed)
    path = os.path.join(cfg.output_dir, "design.extracted.json")
    design.to_json(path)
    if isinstance(res, CmaResult):
        res.history_to_csv(os.path.join(cfg.output_dir, "cma_history.csv"))
    return path


HANDLERS = {"solve": cmd_solve, "manifold": cmd_manifold, "benchmark-solver": cmd_benchmark,
            "train": cmd_train, "eval": cmd_eval, "extract": cmd_extract}


# ---------------------------------------------------------------------------
# entry point

def worker_count():
    """Worker cap from ``TENDONOPT_THREADS`` (default: available cores)."""
    raw = os.environ.get("TENDONOPT_THREADS")
    if raw is None:
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n < 1:
        raise ConfigError(f"TENDONOPT_THREADS must be a positive integer, got {raw!r}",
                          "TENDONOPT_THREADS")
    return n


def build_parser():
    p = argparse.ArgumentParser(prog="tendonopt", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="JSON config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--design", help="design JSON to start from (overrides design_path)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _fail(kind, exc, out_dir, code):
    detail = {"error": kind, "message": str(exc)}
    if isinstance(exc, ConfigError):
        detail.update(key=exc.key, line=exc.line)
    if isinstance(exc, InfeasibleCommand) and exc.motor_angles is not None:
        detail["motor_angles"] = np.asarray(exc.motor_angles).tolist()
    where = f" (key {exc.key!r}, line {exc.line})" if isinstance(exc, ConfigError) and exc.line \
        else f" (key {exc.key!r})" if isinstance(exc, ConfigError) and exc.key else ""
    print(f"tendonopt: {kind}: {exc}{where}", file=sys.stderr)
    print(json.dumps(detail), file=sys.stderr)
    if out_dir and os.path.isdir(out_dir):
        _write_json(os.path.join(out_dir, "error.json"), detail)
    return code


def run(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.out
    try:
        cfg = parse_config(args.config, args.seed, args.out, args.design)
        out_dir = cfg.output_dir
        try:
            os.makedirs(out_dir, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"output_dir {out_dir} is not writable: {exc.strerror}",
                              "output_dir") from exc
        worker_count()
        resolved = cfg.resolved()
        resolved_path = os.path.join(out_dir, "config.resolved.json")
        _write_json(resolved_path, resolved)
        log.info("resolved config written to %s (workers: %d)", resolved_path, worker_count())
        path = HANDLERS[args.command](cfg)
    except ConfigError as exc:
        return _fail("config error", exc, out_dir, 2)
    except (InvalidArgument, InfeasibleCommand, TrainingDivergence, OptimizerAbort) as exc:
        return _fail(type(exc).__name__, exc, out_dir, 1)
    except OSError as exc:
        return _fail("io error", exc, out_dir, 1)
    print(path)
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
