"""Recursive sub-goal planning, action extraction and closed-loop rollouts."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .envs import GOAL_RADIUS, Goal, Maze, Trajectory, step_batch, valid_positions
from .errors import ConfigError, PlanningError, ShapeError, StateError
from .learner import DynamicsStack, GoalPolicy
from .nn import mlp_predict


@dataclass
class PlannerConfig:
    max_steps: int = 1000
    replan_every: int = 1
    action_clip: float = 1.0

    def __post_init__(self):
        if self.replan_every < 1 or self.max_steps < 1:
            raise ConfigError("replan_every and max_steps must be >= 1")


@dataclass
class Plan:
    kappa: np.ndarray  # (B, sd*(N+1)+gd) normalised kappa-hat(N)
    subgoals: np.ndarray  # (B, N, sd) de-normalised, nearest first


@dataclass
class PlanRecord:
    step: int
    state: list
    subgoals: list
    goal: list
    action: list
    latency_us: float


def plan_normalized(stack: DynamicsStack, s_n, g_n) -> np.ndarray:
    """Chain the stack in normalised space. Returns ``(B, N, sd)`` nearest first."""
    s_n = np.asarray(s_n, dtype=np.float32)
    g_n = np.asarray(g_n, dtype=np.float32)
    if s_n.ndim != 2 or s_n.shape[1] != stack.state_dim or g_n.shape != (len(s_n), stack.goal_dim):
        raise ConfigError(f"state/goal shapes {s_n.shape}/{g_n.shape} do not fit the stack")
    preds = []  # farthest first
    for model in stack.models:
        x = np.concatenate([s_n, *preds[::-1], g_n], axis=1)
        y = mlp_predict(model, x)
        if not np.all(np.isfinite(y)):
            raise PlanningError("non-finite sub-goal prediction")
        preds.append(y)
    if not preds:
        return np.zeros((len(s_n), 0, stack.state_dim), np.float32)
    return np.stack(preds[::-1], axis=1)


def plan_subgoals(stack: DynamicsStack, s, g) -> Plan:
    """Recursive sub-goal plan for raw states ``s`` (B, sd) and goals ``g`` (B, gd)."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float32))
    g = np.atleast_2d(np.asarray(g, dtype=np.float32))
    if s.shape[1] != stack.state_dim or g.shape != (len(s), stack.goal_dim):
        raise ConfigError(f"state/goal shapes {s.shape}/{g.shape} do not fit the stack")
    s_n, g_n = stack.norm.norm_state(s), stack.norm.norm_goal(g)
    sub_n = plan_normalized(stack, s_n, g_n)
    kappa = np.concatenate([s_n, sub_n.reshape(len(s_n), -1), g_n], axis=1)
    return Plan(kappa, stack.norm.denorm_state(sub_n))


def kappa_hat(policy: GoalPolicy, s, g, subgoals=None) -> np.ndarray:
    """Normalised policy input from raw state, goal and (raw, nearest-first) sub-goals."""
    s = np.atleast_2d(np.asarray(s, dtype=np.float32))
    g = np.atleast_2d(np.asarray(g, dtype=np.float32))
    parts = [policy.norm.norm_state(s)]
    if policy.n_levels:
        parts.append(policy.norm.norm_state(subgoals).reshape(len(s), -1))
    parts.append(policy.norm.norm_goal(g))
    return np.concatenate(parts, axis=1)


def act(policy: GoalPolicy, kappa, clip: float = 1.0) -> np.ndarray:
    kappa = np.atleast_2d(np.asarray(kappa, dtype=np.float32))
    if kappa.shape[1] != policy.net.in_dim:
        raise ShapeError(f"kappa width {kappa.shape[1]} != policy input {policy.net.in_dim}")
    return np.clip(mlp_predict(policy.net, kappa), -clip, clip).astype(np.float32)


@dataclass
class EpisodeResult:
    trajectory: Trajectory
    success: bool
    length: int
    latencies_us: np.ndarray
    traces: list = field(default_factory=list)
    error: str | None = None


def rollout_batch(maze: Maze, stack: DynamicsStack | None, policy: GoalPolicy, starts, goals,
                  cfg: PlannerConfig, radius: float = GOAL_RADIUS, record: bool = False) -> list[EpisodeResult]:
    """Run ``B`` episodes in lock-step, each stopping on success or ``max_steps``.

    Finished episodes drop out of the batch. In batched mode the latency logged
    per decision is the batch call time divided by the number of active
    episodes; with ``B == 1`` it is the true per-decision latency.
    """
    starts = np.atleast_2d(np.asarray(starts, dtype=np.float32))
    goals = np.atleast_2d(np.asarray(goals, dtype=np.float32))
    B = len(starts)
    if stack is not None and stack.spec.N != policy.n_levels:
        raise ConfigError(f"stack depth {stack.spec.N} != policy levels {policy.n_levels}")
    if stack is None and policy.n_levels:
        raise ConfigError("an RSP policy needs its dynamics stack")
    if not np.all(valid_positions(maze, starts[:, :2])):
        raise StateError("start state outside the open region")

    states = [[s] for s in starts]
    actions = [[] for _ in range(B)]
    lat = [[] for _ in range(B)]
    traces = [[] for _ in range(B)]
    done = np.zeros(B, bool)
    ok = np.zeros(B, bool)
    errors = [None] * B
    cur = starts.copy()
    cached = None
    for step in range(cfg.max_steps + 1):
        d = np.hypot(*(cur[:, :2].astype(np.float64) - goals).T)
        newly = ~done & (d <= radius)
        ok |= newly
        done |= newly
        if step == cfg.max_steps or done.all():
            break
        live = np.flatnonzero(~done)
        t0 = time.perf_counter()
        try:
            if stack is not None and step % cfg.replan_every == 0:
                if cached is None:
                    cached = np.zeros((B, stack.spec.N, stack.state_dim), np.float32)
                cached[live] = plan_subgoals(stack, cur[live], goals[live]).subgoals
            sub = cached[live] if stack is not None else None
            a = act(policy, kappa_hat(policy, cur[live], goals[live], sub), cfg.action_clip)
        except PlanningError as exc:
            for i in live:
                errors[i] = str(exc)
            done[live] = True
            break
        dt_us = (time.perf_counter() - t0) * 1e6 / len(live)
        nxt = step_batch(maze, cur[live], a, check=False)
        for j, i in enumerate(live):
            actions[i].append(a[j])
            lat[i].append(dt_us)
            if record:
                traces[i].append(PlanRecord(step, cur[i].tolist(), [] if sub is None else sub[j].tolist(),
                                            goals[i].tolist(), a[j].tolist(), dt_us))
            states[i].append(nxt[j])
        cur[live] = nxt

    out = []
    for i in range(B):
        # the terminal state carries no action; pad with zeros so lengths match
        acts = np.array(actions[i] + [np.zeros(2, np.float32)], dtype=np.float32).reshape(-1, 2)
        traj = Trajectory(np.array(states[i], dtype=np.float32), acts)
        out.append(EpisodeResult(traj, bool(ok[i]), len(actions[i]), np.array(lat[i]), traces[i], errors[i]))
    return out


def rollout(maze: Maze, stack, policy: GoalPolicy, goal: Goal, cfg: PlannerConfig, start,
            record: bool = True) -> EpisodeResult:
    """Single closed-loop episode from ``start`` (raw state vector) toward ``goal``."""
    return rollout_batch(maze, stack, policy, [start], [goal.position], cfg, goal.radius, record)[0]


def traces_to_jsonl(traces, path) -> None:
    with open(path, "w") as f:
        for r in traces:
            f.write(json.dumps(r.__dict__) + "\n")
