import json

import numpy as np
import pytest

import rsp.planner as planner
from rsp.dataset import NormStats, RelabelSpec, fit_normalizer, relabel_dataset
from rsp.envs import Goal, make_maze, maze_from_ascii, replay, scripted_collect
from rsp.errors import ConfigError, ShapeError
from rsp.learner import DynamicsStack, GoalPolicy, TrainConfig, train_rsp
from rsp.nn import Mlp, mlp_init
from rsp.planner import (
    PlannerConfig,
    act,
    kappa_hat,
    plan_subgoals,
    rollout,
    rollout_batch,
    traces_to_jsonl,
)

UNIT = NormStats(np.zeros(4), np.ones(4), np.zeros(2), np.ones(2))
OPEN = maze_from_ascii("\n".join(["#" * 12] + ["#" + "." * 10 + "#"] * 10 + ["#" * 12]))


def zero_net(dims):
    net = mlp_init(dims, seed=0)
    for p in net.params():
        p[...] = 0
    return net


def random_stack(N, norm=UNIT, seed=0, hidden=8):
    models = [mlp_init([4 * n + 2, hidden, hidden, 4], seed + n) for n in range(1, N + 1)]
    return DynamicsStack(models, RelabelSpec(8 * 2 ** (N - 1), N), norm)


def random_policy(N, norm=UNIT, seed=0, hidden=8):
    return GoalPolicy(mlp_init([4 * (N + 1) + 2, hidden, hidden, 2], seed), norm, N)


def test_zero_f1_predicts_state_mean():
    norm = NormStats(np.array([3.0, 4.0, 0.1, -0.2]), np.array([2.0, 1.5, 0.3, 0.3]), np.zeros(2), np.ones(2))
    stack = DynamicsStack([zero_net([6, 8, 8, 4])], RelabelSpec(32, 1), norm)
    plan = plan_subgoals(stack, [[7.0, 1.0, 0.5, 0.5]], [[2.0, 2.0]])
    np.testing.assert_allclose(plan.subgoals[0, 0], norm.state_mean.astype(np.float32), rtol=0, atol=1e-7)


def test_plan_makes_n_passes_with_growing_widths(monkeypatch):
    calls = []
    real = planner.mlp_predict

    def spy(net, x):
        calls.append((id(net), x.shape[1], np.array(x)))
        return real(net, x)

    monkeypatch.setattr(planner, "mlp_predict", spy)
    stack = random_stack(3)
    plan = plan_subgoals(stack, np.ones((5, 4)), np.ones((5, 2)))
    assert [w for _, w, _ in calls] == [6, 10, 14]
    # farther horizons are computed first and fed into the next model
    assert [i for i, _, _ in calls] == [id(m) for m in stack.models]
    out1 = real(stack.models[0], calls[0][2])
    np.testing.assert_array_equal(calls[1][2][:, 4:8], out1)
    out2 = real(stack.models[1], calls[1][2])
    np.testing.assert_array_equal(calls[2][2][:, 4:8], out2)
    np.testing.assert_array_equal(calls[2][2][:, 8:12], out1)
    assert plan.subgoals.shape == (5, 3, 4)
    np.testing.assert_array_equal(plan.subgoals[:, 2], out1)  # nearest first
    calls.clear()
    act(random_policy(3), plan.kappa)
    assert len(calls) == 1 and calls[0][1] == 18


def _relu_linear(matrix):
    """2-hidden-layer net computing ``matrix @ x`` exactly via relu(x) - relu(-x)."""
    out_dim, in_dim = matrix.shape
    w0 = np.vstack([np.eye(in_dim), -np.eye(in_dim)])
    w1 = np.eye(2 * in_dim)
    w2 = np.hstack([matrix, -matrix])
    ws = [w0, w1, w2]
    bs = [np.zeros(2 * in_dim), np.zeros(2 * in_dim), np.zeros(out_dim)]
    return Mlp([in_dim, 2 * in_dim, 2 * in_dim, out_dim], [w.astype(np.float32) for w in ws],
               [b.astype(np.float32) for b in bs])


def test_hand_built_stack_matches_hand_chain():
    # f_1: jump to the goal position at rest; f_2: midpoint of s and the level-1 sub-goal
    m1 = np.zeros((4, 6))
    m1[0, 4] = m1[1, 5] = 1
    m2 = np.zeros((4, 10))
    for d in range(4):
        m2[d, d] = m2[d, 4 + d] = 0.5
    stack = DynamicsStack([_relu_linear(m1), _relu_linear(m2)], RelabelSpec(32, 2), UNIT)
    s = np.array([[1.5, 2.25, 0.5, -0.25]])
    g = np.array([[9.0, 4.0]])
    plan = plan_subgoals(stack, s, g)
    far = np.array([9.0, 4.0, 0.0, 0.0])
    near = (s[0] + far) / 2
    np.testing.assert_array_equal(plan.subgoals[0], np.array([near, far], np.float32))
    np.testing.assert_array_equal(plan.kappa[0], np.r_[s[0], near, far, g[0]].astype(np.float32))


def test_plan_rejects_bad_dims():
    with pytest.raises(ConfigError):
        plan_subgoals(random_stack(1), np.ones((2, 3)), np.ones((2, 2)))


def test_plan_non_finite_is_planning_error():
    stack = random_stack(1)
    stack.models[0].biases[-1][0] = np.nan
    with pytest.raises(planner.PlanningError):
        plan_subgoals(stack, np.ones((1, 4)), np.ones((1, 2)))


def test_act_zero_policy_and_clip():
    pol = GoalPolicy(zero_net([10, 8, 8, 2]), UNIT, 1)
    assert np.all(act(pol, np.ones(10)) == 0)
    pol.net.biases[-1][:] = [3.0, -7.0]
    np.testing.assert_array_equal(act(pol, np.ones(10))[0], [1.0, -1.0])


def test_act_deterministic_and_shape_checked():
    pol = random_policy(2)
    k = np.random.default_rng(0).standard_normal((3, 14))
    assert np.array_equal(act(pol, k), act(pol, k))
    with pytest.raises(ShapeError):
        act(pol, np.ones((1, 13)))


def test_start_inside_goal():
    res = rollout(OPEN, random_stack(1), random_policy(1), Goal((3.0, 3.0), 0.5), PlannerConfig(50),
                  [3.2, 3.1, 0, 0])
    assert res.success and res.length == 0 and res.traces == []
    assert len(res.trajectory) == 1


def test_replan_cadence_caches_plans():
    stack, pol = random_stack(2, seed=3), random_policy(2, seed=3)
    goal = Goal((9.5, 9.5), 0.5)
    start = [2.5, 2.5, 0, 0]
    every = rollout(OPEN, stack, pol, goal, PlannerConfig(12, replan_every=1), start)
    cached = rollout(OPEN, stack, pol, goal, PlannerConfig(12, replan_every=4), start)
    assert every.traces[0].action == cached.traces[0].action
    for t in range(12):
        rec = cached.traces[t]
        fresh = plan_subgoals(stack, [rec.state], [rec.goal]).subgoals[0]
        if t % 4 == 0:
            np.testing.assert_array_equal(rec.subgoals, fresh)
        else:
            assert rec.subgoals == cached.traces[t - t % 4].subgoals
    assert every.traces[1].subgoals != cached.traces[1].subgoals


def test_rollout_trajectory_replays():
    res = rollout(OPEN, random_stack(2), random_policy(2), Goal((9.5, 9.5), 0.5), PlannerConfig(40),
                  [2.5, 2.5, 0, 0])
    assert 0 < res.length <= 40 and len(res.latencies_us) == res.length
    assert np.all(res.latencies_us > 0)
    assert np.array_equal(replay(OPEN, res.trajectory), res.trajectory.states)


def test_batch_matches_single_episodes():
    stack, pol = random_stack(1, seed=5), random_policy(1, seed=5)
    starts = np.array([[2.5, 2.5, 0, 0], [7.5, 3.5, 0, 0], [4.2, 8.8, 0, 0]], np.float32)
    goals = np.array([[9.5, 9.5], [1.5, 1.5], [4.5, 8.5]], np.float32)
    batch = rollout_batch(OPEN, stack, pol, starts, goals, PlannerConfig(10))
    for i in range(3):
        one = rollout(OPEN, stack, pol, Goal(tuple(goals[i]), 0.5), PlannerConfig(10), starts[i])
        # BLAS may round differently with batch size, so only float-close
        np.testing.assert_allclose(one.trajectory.states, batch[i].trajectory.states, atol=1e-5)
        assert one.success == batch[i].success


def test_planning_error_fails_episode():
    stack = random_stack(1)
    stack.models[0].biases[-1][0] = np.inf
    res = rollout(OPEN, stack, random_policy(1), Goal((9.5, 9.5), 0.5), PlannerConfig(10), [2.5, 2.5, 0, 0])
    assert not res.success and "non-finite" in res.error


def test_depth_mismatch_rejected():
    with pytest.raises(ConfigError):
        rollout(OPEN, random_stack(2), random_policy(1), Goal((9.5, 9.5)), PlannerConfig(5), [2.5, 2.5, 0, 0])


def test_trace_jsonl(tmp_path):
    res = rollout(OPEN, random_stack(2), random_policy(2), Goal((9.5, 9.5), 0.5), PlannerConfig(5),
                  [2.5, 2.5, 0, 0])
    path = tmp_path / "t.jsonl"
    traces_to_jsonl(res.traces, path)
    rows = [json.loads(line) for line in path.read_text().splitlines()]
    assert len(rows) == 5 and [r["step"] for r in rows] == list(range(5))
    assert all(len(r["subgoals"]) == 2 and len(r["action"]) == 2 and r["latency_us"] > 0 for r in rows)


def test_kappa_hat_layout():
    norm = NormStats(np.array([1.0, 1.0, 0.0, 0.0]), np.array([2.0, 2.0, 1.0, 1.0]), np.zeros(2), np.ones(2))
    pol = random_policy(1, norm)
    k = kappa_hat(pol, [[3.0, 5.0, 0.5, 0.5]], [[1.0, 3.0]], np.array([[[5.0, 1.0, 0.0, 0.0]]]))
    np.testing.assert_array_equal(k[0], np.array([1, 2, 0.5, 0.5, 2, 0, 0, 0, 0, 1], np.float32))


def test_trained_corridor_bundle_reaches_far_end():
    m = make_maze("corridor")
    trajs = scripted_collect(m, "diverse", 64, 500, seed=0)
    norm = fit_normalizer(trajs)
    spec = RelabelSpec(32, 1)
    stack, pol, _ = train_rsp(relabel_dataset(trajs, spec), TrainConfig.desk(total_steps=10_000), norm)
    rng = np.random.default_rng(0)
    starts = np.c_[1 + rng.uniform(0.125, 0.875, (100, 2)), np.zeros((100, 2))].astype(np.float32)
    goals = np.tile(m.cell_center(m.goal_cell), (100, 1))
    res = rollout_batch(m, stack, pol, starts, goals, PlannerConfig(max_steps=500))
    rate = np.mean([r.success for r in res])
    assert rate >= 0.8
