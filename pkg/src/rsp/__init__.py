"""Recursive skip-step planning for offline goal-conditioned control.

A stack of small MLPs predicts sub-goals at geometrically shrinking horizons,
farthest first, and a goal-conditioned policy acts on the resulting plan.
Everything is plain numpy: the toolkit covers 2-D point-mass mazes, hindsight
relabeling, training, planning rollouts and the evaluation harness.
"""

from .dataset import NormStats, RelabelSpec, fit_normalizer, read_dataset, relabel_dataset, write_dataset
from .envs import Goal, Maze, Trajectory, make_maze, replay, scripted_collect
from .errors import (
    ConfigError,
    FormatError,
    LayoutError,
    PlanningError,
    ShapeError,
    StateError,
    TrainingError,
)
from .learner import Bundle, DynamicsStack, GoalPolicy, TrainConfig, load_bundle, save_bundle, train_gcsl, train_rsp
from .planner import PlannerConfig, act, plan_subgoals, rollout, rollout_batch

__version__ = "0.1.0"
