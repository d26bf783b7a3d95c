"""Train a one-level skip-step planner on the corridor and drive it to the far end.

Runs in about a minute on one core:

    python demos/01_corridor_quickstart.py
"""
import numpy as np

from rsp.analysis import GoalTask, evaluate, train_bundle
from rsp.dataset import RelabelSpec
from rsp.envs import Goal, make_maze, scripted_collect
from rsp.learner import TrainConfig
from rsp.planner import PlannerConfig, plan_subgoals, rollout

maze = make_maze("corridor")
trajs = scripted_collect(maze, "diverse", n_traj=64, max_len=500, seed=0)
print(f"{len(trajs)} trajectories, {sum(len(t) for t in trajs)} states")

# K=32, N=1: one dynamics model looking 32 steps ahead plus the policy
spec = RelabelSpec(K=32, N=1)
bundle = train_bundle(trajs, spec, TrainConfig.desk(total_steps=5000, seed=0))

start = np.array([1.5, 1.5, 0.0, 0.0], np.float32)
goal = maze.cell_center(maze.goal_cell)
plan = plan_subgoals(bundle.stack, start[None], goal[None])
print("first sub-goal from the start:", np.round(plan.subgoals[0, 0], 2))

res = rollout(maze, bundle.stack, bundle.policy, Goal(tuple(goal)), PlannerConfig(max_steps=500), start)
print(f"single episode: success={res.success} after {res.length} steps, "
      f"median decision {np.median(res.latencies_us):.0f} us")

rep = evaluate(bundle, maze, GoalTask("designated"), episodes=50, seeds=[0, 1], cfg=PlannerConfig(500))
print(rep.summary())
