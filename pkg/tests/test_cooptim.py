import dataclasses
import json
import math

import numpy as np
import pytest

from tendonopt import nn
from tendonopt.chain import ChainState, DesignParams, TaskSpec, forward_kinematics, reward
from tendonopt.cooptim import (
    Encoding,
    ReplayBuffer,
    TrainConfig,
    Trainer,
    Transition,
    _regression_arrays,
    collect_rollouts,
    design_to_phi,
    eval_policy,
    extract_hardware,
    make_networks,
    morph_loop,
    phi_mask,
    phi_to_design,
    policy_update,
    regression_grads,
    train_proxy,
    unroll_proxy,
)
from tendonopt.errors import InvalidArgument, TrainingDivergence
from tendonopt.solver import sample_commands, solve_exact_projected

DESK = DesignParams.paper_initial(link_lengths=[0.13] * 3)
TASK = TaskSpec(goal=(0.13, 0.3))


def small_cfg(**kw):
    base = dict(horizon=5, rollouts_per_epoch=2, proxy_hidden=(8,), policy_hidden=(8,),
                proxy_steps=20, policy_steps=2, epochs=2, length_bounds=(0.05, 0.2),
                gate_min_transitions=0)
    base.update(kw)
    return TrainConfig(**base)


def random_transitions(design, count, seed=0, motor_max=2 * math.pi):
    """Transitions from uniformly random commands at the zero state."""
    cfg = small_cfg(horizon=1, rollouts_per_epoch=count, exploration_sigma=0.0)
    enc, _, policy = make_networks(design, cfg, False)
    rng = np.random.default_rng(seed)
    cmds = sample_commands(design, count, rng, motor_max)
    theta, ee, applied = solve_exact_projected(design, cmds)
    zero = ChainState.zero(design)
    return [Transition(zero, a, ChainState.from_joints(design, t, a),
                       reward(e, TASK), TASK.goal, False, 0)
            for a, t, e in zip(applied, theta, ee)], enc


def constant_policy(enc, bias):
    net = nn.init_network((enc.state_size, enc.m), "tanh", 0)
    flat = np.zeros(net.n_params)
    flat[-enc.m:] = bias
    return nn.with_flat_params(net, flat)


class TestConfig:
    @pytest.mark.parametrize("kw", [{"mode": "nope"}, {"alpha": -1.0}, {"horizon": 0},
                                    {"extract_every_n_epochs": 0},
                                    {"trainable_params": ["winch"]},
                                    {"radius_bounds": (0.03, 0.002)}])
    def test_invalid(self, kw):
        with pytest.raises(InvalidArgument):
            TrainConfig(**kw)

    def test_groups(self):
        assert TrainConfig(mode="pretension_only").groups == ("pretension",)
        assert TrainConfig(mode="fixed_design_baseline").groups == ()
        assert TrainConfig(trainable_params=["link_lengths"]).groups == ("link_lengths",)

    def test_phi_roundtrip(self):
        phi = design_to_phi(DESK)
        assert phi.shape == (12,)
        assert phi_to_design(DESK, phi) == DESK
        mask = phi_mask(DESK, ("pretension",))
        assert mask.sum() == 3 and mask[6:9].all()


class TestRollouts:
    def test_transition_count_and_rewards(self):
        cfg = small_cfg()
        enc, _, policy = make_networks(DESK, cfg, False)
        buf = ReplayBuffer(100)
        out = collect_rollouts(DESK, policy, [TASK], cfg, enc, np.random.default_rng(0),
                               buffer=buf, design_version=3)
        assert len(out) == 10 and len(buf) == 10
        for t in out:
            assert t.design_version == 3
            assert t.reward == pytest.approx(reward(t.next_state.ee_position, TASK))
            t.next_state.check(DESK)
        # episodes restart from the zero state
        assert np.all(out[5].state.joint_angles == 0)

    def test_deterministic(self):
        cfg = small_cfg()
        enc, _, policy = make_networks(DESK, cfg, False)
        a = collect_rollouts(DESK, policy, [TASK], cfg, enc, np.random.default_rng(4))
        b = collect_rollouts(DESK, policy, [TASK], cfg, enc, np.random.default_rng(4))
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x.action, y.action)
            np.testing.assert_array_equal(x.next_state.joint_angles, y.next_state.joint_angles)

    def test_buffer_versions(self):
        buf = ReplayBuffer(3)
        cfg = small_cfg(horizon=2, rollouts_per_epoch=1)
        enc, _, policy = make_networks(DESK, cfg, False)
        collect_rollouts(DESK, policy, [TASK], cfg, enc, np.random.default_rng(0), buffer=buf,
                         design_version=0)
        collect_rollouts(DESK, policy, [TASK], cfg, enc, np.random.default_rng(0), buffer=buf,
                         design_version=1)
        assert len(buf) == 3
        assert len(buf.current(1)) == 2 and len(buf.current(0)) == 1
        buf.discard_except(1)
        assert len(buf) == 2 and all(t.design_version == 1 for t in buf)


class TestProxy:
    def test_alpha_scales_gradient(self):
        data, enc = random_transitions(DESK, 20)
        x, y = _regression_arrays(data, enc)
        proxy = nn.init_network((5, 8, 5), "tanh", 0)
        l1, g1 = regression_grads(proxy, x, y, 1.0)
        l2, g2 = regression_grads(proxy, x, y, 2.5)
        assert l2 == pytest.approx(2.5 * l1)
        np.testing.assert_allclose(nn.flat_grads(g2), 2.5 * nn.flat_grads(g1))

    def test_memorizes_single_transition(self):
        data, enc = random_transitions(DESK, 1)
        cfg = small_cfg(proxy_lr=1e-2)
        proxy = nn.init_network((5, 16, 5), "tanh", 0)
        trainer = Trainer(proxy, None)
        _, heldout = train_proxy(trainer, data * 20, enc, cfg, np.random.default_rng(0), steps=500)
        assert heldout < 1e-6

    def test_scalar_chain_heldout_accuracy(self):
        d = DesignParams(flexion_radii=[[0.005]], winch_radii=[0.01], link_lengths=[0.13])
        reach = (math.pi / 2) * 0.005 / 0.01
        data, enc = random_transitions(d, 2000, seed=1, motor_max=reach)
        cfg = small_cfg(proxy_lr=3e-3, batch_size=128)
        trainer = Trainer(nn.init_network((2, 16, 3), "tanh", 0), None)
        train_proxy(trainer, data, enc, cfg, np.random.default_rng(0), steps=3000)
        held, _ = random_transitions(d, 200, seed=99, motor_max=reach)
        x, y = _regression_arrays(held, enc)
        pred, _ = nn.net_forward(trainer.proxy, x)
        assert np.max(np.abs(pred[:, 0] - y[:, 0])) < 5e-3


def _unroll_value(policy, proxy, enc, goals, start, horizon, task):
    return unroll_proxy(policy, proxy, enc, goals, start, horizon, task, 1e-3)[0]


class TestPolicyGradient:
    def test_unroll_gradients_match_finite_differences(self):
        cfg = small_cfg(proxy_hidden=(4,), policy_hidden=(4,))
        enc, proxy, policy = make_networks(DESK, cfg, True)
        goals = np.array([[0.13, 0.3], [0.2, 0.2]])
        start = forward_kinematics(np.zeros(3), DESK.link_lengths)[1]
        task = TaskSpec(goal=(0.13, 0.3), bonus=0.0)
        _, pg, qg = unroll_proxy(policy, proxy, enc, goals, start, 3, task, 1e-3)
        h = 1e-6
        for net, grads, which in ((policy, pg, 0), (proxy, qg, 1)):
            theta = nn.flat_params(net)
            analytic = nn.flat_grads(grads)
            numeric = np.empty_like(theta)
            for i in range(theta.size):
                vals = []
                for sgn in (1, -1):
                    t = theta.copy()
                    t[i] += sgn * h
                    moved = nn.with_flat_params(net, t)
                    args = (moved, proxy) if which == 0 else (policy, moved)
                    vals.append(-_unroll_value(*args, enc, goals, start, 3, task))
                numeric[i] = (vals[0] - vals[1]) / (2 * h)
            err = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
            assert err < 1e-5

    def sanity_problem(self):
        """One joint, one motor; a linear proxy moves ee_x with the command."""
        d = DesignParams(flexion_radii=[[0.005]], winch_radii=[0.01], link_lengths=[1.0])
        cfg = TrainConfig(horizon=3, policy_hidden=(8,), policy_lr=1e-2, policy_steps=20,
                          motor_max=1.0, proxy_gate=1.0)
        enc = Encoding(d, cfg, False)
        proxy = nn.init_network((2, 3), "tanh", 0)
        # outputs [theta', ee_x, ee_y] = [a, a, 0] for input [theta, a]
        proxy = nn.with_flat_params(proxy, np.array([0, 1, 0, 1, 0, 0, 0, 0, 0], dtype=float))
        policy = nn.init_network((enc.state_size, 8, 1), "tanh", 3)
        return d, cfg, enc, Trainer(proxy, policy)

    def test_linear_proxy_sanity(self):
        d, cfg, enc, trainer = self.sanity_problem()
        task = TaskSpec(goal=(0.3, 0.0), bonus=0.0)
        goals = np.array([task.goal])
        start = np.array([1.0, 0.0])
        rng = np.random.default_rng(0)
        returns = []
        for _ in range(10):
            returns.append(policy_update(trainer, enc, goals, start, task, cfg, [], rng,
                                         train_proxy_with_task=False))
        drops = sum(b < a for a, b in zip(returns, returns[1:]))
        assert drops <= 2
        for _ in range(40):
            policy_update(trainer, enc, goals, start, task, cfg, [], rng,
                          train_proxy_with_task=False)
        # the first action of the rollout is taken at the zero state
        x = enc.policy_input(np.zeros(1), np.zeros(1), start, goals[0])
        action = enc.squash(nn.net_forward(trainer.policy, x)[0])[0]
        assert action[0] == pytest.approx(0.3, abs=1e-2)

    def test_zero_horizon_noop(self):
        d, cfg, enc, trainer = self.sanity_problem()
        before = (trainer.policy.version, trainer.proxy.version)
        out = policy_update(trainer, enc, np.array([[0.3, 0.0]]), np.array([1.0, 0.0]),
                            TaskSpec(goal=(0.3, 0.0)), cfg, [], np.random.default_rng(0),
                            horizon=0)
        assert out == 0.0
        assert (trainer.policy.version, trainer.proxy.version) == before

    def test_exploding_task_gradient_raises(self):
        d, cfg, enc, trainer = self.sanity_problem()
        cfg = dataclasses.replace(cfg, grad_clip=1e-12)
        with pytest.raises(TrainingDivergence):
            policy_update(trainer, enc, np.array([[0.3, 0.0]]), np.array([1.0, 0.0]),
                          TaskSpec(goal=(0.3, 0.0)), cfg, [], np.random.default_rng(0))

    def test_large_regression_gradient_is_only_clipped(self):
        data, enc = random_transitions(DESK, 40)
        cfg = small_cfg(alpha=1e6, grad_clip=1e-3)
        trainer = Trainer(nn.init_network((5, 8, 5), "tanh", 0), None)
        loss, heldout = train_proxy(trainer, data, enc, cfg, np.random.default_rng(0), steps=5)
        assert math.isfinite(loss) and math.isfinite(heldout)


class TestExtraction:
    def test_pretension_only_mask(self):
        data, enc = random_transitions(DESK, 120)
        cfg = small_cfg(cma_max_evals=40)
        proxy = nn.init_network((5, 8, 5), "tanh", 0)
        new, _ = extract_hardware(proxy, data, DESK, cfg, enc, groups=("pretension",))
        assert new.flexion_radii.tobytes() == DESK.flexion_radii.tobytes()
        assert new.link_lengths.tobytes() == DESK.link_lengths.tobytes()

    def test_nothing_trainable(self):
        data, enc = random_transitions(DESK, 120)
        proxy = nn.init_network((5, 8, 5), "tanh", 0)
        new, res = extract_hardware(proxy, data, DESK, small_cfg(), enc, groups=())
        assert new is DESK and res is None

    def test_needs_enough_data(self):
        data, enc = random_transitions(DESK, 50)
        proxy = nn.init_network((5, 8, 5), "tanh", 0)
        with pytest.raises(InvalidArgument):
            extract_hardware(proxy, data, DESK, small_cfg(), enc)


class TestEvaluation:
    def test_zero_policy_distance(self):
        cfg = small_cfg()
        enc = Encoding(DESK, cfg, False)
        policy = constant_policy(enc, [-50.0, -50.0])
        goals = [(0.13, 0.3), (0.2, 0.1)]
        mean, std, recs = eval_policy(DESK, policy, goals, 2, cfg, enc)
        ee0 = np.array([0.39, 0.0])
        expected = [np.linalg.norm(np.array(g) - ee0) for g in goals]
        assert mean == pytest.approx(np.mean(expected), abs=1e-12)
        assert len(recs) == 4 and all(r["projections"] == 0 for r in recs)

    def test_counts_projections(self):
        cfg = small_cfg()
        enc = Encoding(DESK, cfg, False)
        policy = constant_policy(enc, [50.0, 50.0])
        _, _, recs = eval_policy(DESK, policy, [(0.13, 0.3)], 1, cfg, enc)
        assert recs[0]["projections"] == cfg.horizon


class TestLoop:
    def test_deterministic_and_logged(self, tmp_path):
        cfg = small_cfg(epochs=3, seed=5)
        a = morph_loop(cfg, DESK, [TASK], output_dir=tmp_path / "a")
        b = morph_loop(cfg, DESK, [TASK], output_dir=tmp_path / "b")
        la = (tmp_path / "a" / "metrics.jsonl").read_bytes()
        assert la == (tmp_path / "b" / "metrics.jsonl").read_bytes()
        rows = [json.loads(line) for line in la.decode().splitlines()]
        assert [r["epoch"] for r in rows] == [0, 1, 2]
        for key in ("mean_return", "proxy_loss", "phi", "eval_distance"):
            assert key in rows[0]
        for name in ("design.json", "policy.json", "proxy.json"):
            assert (tmp_path / "a" / name).exists()
        assert a.mean_distance == b.mean_distance

    def test_gate_blocks_policy_updates(self):
        cfg = small_cfg(epochs=2, proxy_gate=1e-12)
        res = morph_loop(cfg, DESK, [TASK])
        assert all(m["gated"] and m["estimated_return"] is None for m in res.metrics)

    def test_pretension_only_keeps_frozen_entries(self):
        cfg = small_cfg(mode="pretension_only", epochs=4, extract_every_n_epochs=2, horizon=10,
                        rollouts_per_epoch=10, proxy_gate=1.0, cma_max_evals=40)
        res = morph_loop(cfg, DESK, [TASK])
        assert res.final_design.flexion_radii.tobytes() == DESK.flexion_radii.tobytes()
        assert res.final_design.link_lengths.tobytes() == DESK.link_lengths.tobytes()
        assert any(m["extracted"] for m in res.metrics) or res.final_design == DESK

    def test_baseline_never_changes_design(self):
        cfg = small_cfg(mode="fixed_design_baseline", epochs=4, extract_every_n_epochs=2,
                        horizon=10, rollouts_per_epoch=10, proxy_gate=1.0)
        res = morph_loop(cfg, DESK, [TASK])
        assert res.final_design == DESK
        assert not any(m["extracted"] for m in res.metrics)

    def test_multi_goal(self):
        cfg = small_cfg(mode="multi_goal", goal_radius=0.05, eval_goals=3, epochs=2)
        res = morph_loop(cfg, DESK, [TaskSpec(goal=(0.15, 0.25))])
        assert len(res.eval_records) == 3
        assert all(math.dist(r["goal"], (0.15, 0.25)) <= 0.05 + 1e-12 for r in res.eval_records)
