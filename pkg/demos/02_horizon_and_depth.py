"""Compare chained rollout error for coarse, fine and recursive stacks.

A small-budget version of the horizon and depth trends: longer skips should
drift less than short ones when chained out to 256 steps. Takes about a minute.

    python demos/02_horizon_and_depth.py
"""
import numpy as np

from rsp.analysis import rollout_rmse, train_bundle
from rsp.dataset import RelabelSpec, fit_normalizer
from rsp.envs import make_maze, scripted_collect
from rsp.learner import TrainConfig

maze = make_maze("ultra")
train = scripted_collect(maze, "diverse", 200, 4000, seed=0)
held_out = scripted_collect(maze, "diverse", 50, 4000, seed=999)
norm = fit_normalizer(train)
cfg = TrainConfig.desk(total_steps=4000, seed=0)

for K, N in [(4, 1), (32, 1), (8, 1), (32, 3)]:
    spec = RelabelSpec(K, N)
    b = train_bundle(train, spec, cfg, norm, need_policy=False)
    curve = rollout_rmse(b.stack, held_out, 256)
    print(f"{spec.label:>10}  rmse@256 {curve.at(256):6.3f}  mean 128..256 {curve.mean_over(128, 256):6.3f}")
