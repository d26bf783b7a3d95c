"""Rollout-RMSE compounding-error curves, success-rate evaluation, ablation grids
and planning-latency benchmarks.

All CSV outputs are plot-ready; nothing here draws figures.
"""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import GOAL_DIM, NormStats, RelabelSpec, fit_normalizer, relabel_dataset
from .envs import GOAL_RADIUS, STATE_DIM, Maze, random_open_position
from .errors import ConfigError
from .learner import Bundle, DynamicsStack, GoalPolicy, TrainConfig, train_gcsl, train_rsp
from .nn import mlp_init
from .planner import PlannerConfig, act, kappa_hat, plan_normalized, plan_subgoals, rollout_batch


# --- compounding error ---------------------------------------------------------


@dataclass
class RmseCurve:
    offsets: np.ndarray
    rmse: np.ndarray
    stderr: np.ndarray
    label: str
    n_rollouts: int = 0

    def at(self, offset: int) -> float:
        return float(self.rmse[list(self.offsets).index(offset)])

    def mean_over(self, lo: int, hi: int) -> float:
        m = (self.offsets >= lo) & (self.offsets <= hi)
        return float(self.rmse[m].mean())


def rollout_starts(trajs, H_max: int, start_stride: int = 16):
    """``(traj_index, t)`` pairs with a full ``H_max``-step ground-truth window."""
    out = []
    for i, tr in enumerate(trajs):
        last = len(tr) - 1 - H_max
        out += [(i, t) for t in range(0, last + 1, start_stride)]
    return out


def chained_predictions(stack: DynamicsStack, s0, g, n_chain: int) -> np.ndarray:
    """Feed the lowest-level prediction back ``n_chain`` times with a full replan
    at every link. Returns de-normalised ``(B, n_chain, sd)`` predictions."""
    s_n = stack.norm.norm_state(s0)
    g_n = stack.norm.norm_goal(g)
    out = np.empty((len(s_n), n_chain, stack.state_dim), np.float32)
    for j in range(n_chain):
        s_n = plan_normalized(stack, s_n, g_n)[:, 0]
        out[:, j] = stack.norm.denorm_state(s_n)
    return out


def rollout_rmse(stack: DynamicsStack, trajs, H_max: int, start_stride: int = 16, label: str | None = None) -> RmseCurve:
    """RMSE between chained skip-step predictions and ground truth at offsets ``k, 2k, ..., H_max``.

    Each rollout starts from a ground-truth ``s_t`` with the trajectory's
    achieved final position as goal. Error is taken over all state dimensions in
    de-normalised units; ``stderr`` is the standard error across trajectories
    of the per-trajectory RMSE.
    """
    k = stack.spec.k
    if H_max % k or H_max <= 0:
        raise ConfigError(f"H_max={H_max} must be a positive multiple of the lowest horizon k={k}")
    starts = rollout_starts(trajs, H_max, start_stride)
    if not starts:
        raise ConfigError(f"no evaluation trajectory is long enough for a {H_max}-step rollout")
    n_chain = H_max // k
    s0 = np.array([trajs[i].states[t] for i, t in starts])
    g = np.array([trajs[i].achieved_goal for i, _ in starts])
    gt_idx = np.array([[t + j * k for j in range(1, n_chain + 1)] for _, t in starts])
    gt = np.array([trajs[i].states[gt_idx[r]] for r, (i, _) in enumerate(starts)])
    pred = chained_predictions(stack, s0, g, n_chain)
    sq = np.square(pred.astype(np.float64) - gt.astype(np.float64))  # (R, n_chain, sd)
    rmse = np.sqrt(sq.mean(axis=(0, 2)))
    owner = np.array([i for i, _ in starts])
    per_traj = np.array([np.sqrt(sq[owner == i].mean(axis=(0, 2))) for i in np.unique(owner)])
    stderr = per_traj.std(axis=0, ddof=1) / np.sqrt(len(per_traj)) if len(per_traj) > 1 else np.zeros(n_chain)
    offsets = np.arange(1, n_chain + 1) * k
    return RmseCurve(offsets, rmse, stderr, label or stack.spec.label, len(starts))


def write_rmse_csv(curves, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "offset", "rmse", "stderr"])
        for c in curves:
            for o, r, e in zip(c.offsets, c.rmse, c.stderr):
                w.writerow([c.label, int(o), f"{r:.6g}", f"{e:.6g}"])


# --- success-rate evaluation ----------------------------------------------------


@dataclass
class GoalTask:
    """How evaluation start/goal pairs are drawn.

    ``designated``: start jittered inside the maze's start cell, goal at the
    centre of its goal cell. ``random``: both drawn uniformly over open cells.
    """

    mode: str = "designated"
    radius: float = GOAL_RADIUS

    def sample(self, maze: Maze, n: int, rng):
        starts, goals = [], []
        for _ in range(n):
            if self.mode == "designated":
                if maze.start_cell is None or maze.goal_cell is None:
                    raise ConfigError(f"maze {maze.name!r} has no designated start/goal")
                pos, _ = random_open_position(maze, rng, maze.start_cell)
                goal = maze.cell_center(maze.goal_cell)
            elif self.mode == "random":
                pos, _ = random_open_position(maze, rng)
                goal, _ = random_open_position(maze, rng)
            else:
                raise ConfigError(f"unknown goal task mode {self.mode!r}")
            starts.append([pos[0], pos[1], 0.0, 0.0])
            goals.append(goal)
        return np.array(starts, np.float32), np.array(goals, np.float32)


@dataclass
class EvalReport:
    success_rate: float
    stderr: float
    mean_length: float
    median_length: float
    latency_mean_us: float
    latency_p95_us: float
    episodes: int
    seeds: list
    successes: list = field(default_factory=list)
    lengths: list = field(default_factory=list)
    per_seed: dict = field(default_factory=dict)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("successes")
        d.pop("lengths")
        return d


def make_report(flags, lengths, latencies, seeds, per_seed=None) -> EvalReport:
    flags = np.asarray(flags, bool)
    n = len(flags)
    if n < 1:
        raise ConfigError("a report needs at least one episode")
    p = flags.mean()
    lat = np.asarray(latencies, float) if len(latencies) else np.zeros(1)
    return EvalReport(
        success_rate=float(p),
        stderr=float(np.sqrt(p * (1 - p) / n)),
        mean_length=float(np.mean(lengths)),
        median_length=float(np.median(lengths)),
        latency_mean_us=float(lat.mean()),
        latency_p95_us=float(np.percentile(lat, 95)),
        episodes=n,
        seeds=list(seeds),
        successes=[bool(f) for f in flags],
        lengths=[int(x) for x in lengths],
        per_seed=per_seed or {},
    )


def evaluate(bundle: Bundle, maze: Maze, task: GoalTask, episodes: int, seeds, cfg: PlannerConfig) -> EvalReport:
    """Roll out ``episodes`` start/goal pairs per evaluation seed and aggregate.

    Episodes of one seed run as a single lock-step batch; a planning error
    counts as a failure.
    """
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    flags, lengths, lat, per_seed = [], [], [], {}
    for seed in seeds:
        rng = np.random.default_rng([int(seed), 7])
        starts, goals = task.sample(maze, episodes, rng)
        res = rollout_batch(maze, bundle.stack, bundle.policy, starts, goals, cfg, task.radius)
        f = [r.success and r.error is None for r in res]
        flags += f
        lengths += [r.length for r in res]
        for r in res:
            lat.extend(r.latencies_us)
        per_seed[int(seed)] = float(np.mean(f))
    return make_report(flags, lengths, lat, seeds, per_seed)


# --- ablation grids -------------------------------------------------------------


@dataclass
class GridCell:
    label: str
    spec: RelabelSpec | None  # None for the GCSL baseline
    report: EvalReport | None = None
    rmse: RmseCurve | None = None
    error: str | None = None
    per_seed_rmse: list = field(default_factory=list)


def ablation_grid(specs, trajs, cfg: TrainConfig, seeds, maze: Maze | None = None, task: GoalTask | None = None,
                  episodes: int = 100, planner: PlannerConfig | None = None, rmse_trajs=None,
                  H_max: int | None = None, norm: NormStats | None = None, include_gcsl: bool = False,
                  rmse_stride: int = 16) -> list[GridCell]:
    """Train and evaluate every ``(K, N)`` cell on shared data with a common seed list.

    Each (cell, seed) pair trains its own bundle with ``cfg.seed = seed`` and is
    evaluated with the same seed, so results do not depend on cell order.
    Success evaluation runs when ``maze`` is given, RMSE curves when ``H_max`` is.
    A failing cell is recorded and the grid continues.
    """
    norm = norm or fit_normalizer(trajs)
    task = task or GoalTask()
    planner = planner or PlannerConfig()
    cells = [GridCell(s.label, s) for s in specs]
    if include_gcsl:
        cells.append(GridCell("gcsl", None))
    for cell in cells:
        flags, lengths, lat, per_seed, curves = [], [], [], {}, []
        try:
            for seed in sorted(seeds):
                bundle = train_bundle(trajs, cell.spec, cfg_with_seed(cfg, seed), norm,
                                      need_policy=maze is not None)
                if maze is not None:
                    rep = evaluate(bundle, maze, task, episodes, [seed], planner)
                    flags += rep.successes
                    lengths += rep.lengths
                    lat.append(rep.latency_mean_us)
                    per_seed[seed] = rep.success_rate
                if H_max is not None and bundle.stack is not None:
                    curves.append(rollout_rmse(bundle.stack, rmse_trajs or trajs, H_max, rmse_stride))
            if maze is not None:
                cell.report = make_report(flags, lengths, lat, sorted(seeds), per_seed)
            if curves:
                cell.per_seed_rmse = curves
                cell.rmse = average_curves(curves, cell.label)
        except Exception as exc:  # recorded per cell; the grid keeps going
            cell.error = f"{type(exc).__name__}: {exc}"
    return cells


def cfg_with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    d = asdict(cfg)
    d["seed"] = int(seed)
    return TrainConfig(**d)


def train_bundle(trajs, spec: RelabelSpec | None, cfg: TrainConfig, norm: NormStats | None = None,
                 need_policy: bool = True) -> Bundle:
    """Relabel and train one RSP bundle (or a GCSL bundle when ``spec`` is None)."""
    norm = norm or fit_normalizer(trajs)
    meta = {"train": asdict(cfg)}
    if spec is None:
        pol, _ = train_gcsl(trajs, cfg, norm)
        return Bundle(None, pol, None, norm, meta)
    data = relabel_dataset(trajs, spec, np.random.default_rng([cfg.seed, 5]))
    stack, pol, _ = train_rsp(data, cfg, norm, spec, dynamics=True, policy=need_policy)
    return Bundle(stack, pol, spec, norm, meta)


def average_curves(curves, label) -> RmseCurve:
    r = np.array([c.rmse for c in curves])
    se = r.std(axis=0, ddof=1) / np.sqrt(len(r)) if len(r) > 1 else curves[0].stderr
    return RmseCurve(curves[0].offsets, r.mean(axis=0), se, label, sum(c.n_rollouts for c in curves))


def write_ablation_csv(cells, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["config", "success", "stderr", "mean_len", "latency_us"])
        for c in cells:
            r = c.report
            if r is None:
                w.writerow([c.label, "", "", "", ""])
            else:
                w.writerow([c.label, f"{r.success_rate:.6g}", f"{r.stderr:.6g}", f"{r.mean_length:.6g}",
                            f"{r.latency_mean_us:.6g}"])


# --- latency ---------------------------------------------------------------------


@dataclass
class LatencyStats:
    depth: int
    mean_us: float
    p50_us: float
    p95_us: float
    decisions: int


def latency_bench(bundle: Bundle, decisions: int = 10_000, warmup: int = 200, seed: int = 0) -> LatencyStats:
    """Wall time of one plan+act decision on a single state (no env stepping)."""
    rng = np.random.default_rng(seed)
    norm = bundle.norm
    states = norm.denorm_state(rng.standard_normal((decisions + warmup, STATE_DIM)).astype(np.float32))
    goals = states[::-1, :GOAL_DIM].copy()
    times = np.empty(decisions)
    for i in range(decisions + warmup):
        s, g = states[i : i + 1], goals[i : i + 1]
        t0 = time.perf_counter()
        if bundle.stack is not None:
            plan = plan_subgoals(bundle.stack, s, g)
            act(bundle.policy, plan.kappa)
        else:
            act(bundle.policy, kappa_hat(bundle.policy, s, g))
        t1 = time.perf_counter()
        if i >= warmup:
            times[i - warmup] = (t1 - t0) * 1e6
    return LatencyStats(bundle.spec.N if bundle.spec else 0, float(times.mean()), float(np.percentile(times, 50)),
                        float(np.percentile(times, 95)), decisions)


def random_bundle(spec: RelabelSpec, hidden=(1024, 1024), norm: NormStats | None = None, seed: int = 0) -> Bundle:
    """Untrained bundle with the right shapes; latency does not depend on weights."""
    norm = norm or NormStats(np.zeros(STATE_DIM), np.ones(STATE_DIM), np.zeros(2), np.ones(2))
    models = [mlp_init([STATE_DIM * n + GOAL_DIM, *hidden, STATE_DIM], seed + n) for n in range(1, spec.N + 1)]
    pol = mlp_init([STATE_DIM * (spec.N + 1) + GOAL_DIM, *hidden, 2], seed)
    return Bundle(DynamicsStack(models, spec, norm), GoalPolicy(pol, norm, spec.N), spec, norm)


def latency_by_depth(depths=(1, 2, 3, 4), k: int = 8, hidden=(1024, 1024), decisions: int = 10_000,
                     warmup: int = 500, seed: int = 0) -> list[LatencyStats]:
    out = []
    for N in depths:
        spec = RelabelSpec(k * 2 ** (N - 1), N)
        out.append(latency_bench(random_bundle(spec, hidden, seed=seed), decisions, warmup, seed))
    return out


def write_latency_csv(stats, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["depth", "mean_us", "p50_us", "p95_us", "decisions"])
        for s in stats:
            w.writerow([s.depth, f"{s.mean_us:.6g}", f"{s.p50_us:.6g}", f"{s.p95_us:.6g}", s.decisions])
