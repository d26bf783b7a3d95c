"""Supervised training of the sub-goal dynamics stack, the policy and a flat GCSL baseline.

Every model is a 2-hidden-layer MLP trained with MSE (unit-variance Gaussian
NLL) in normalised space. Inputs are ground-truth dataset columns only; model
predictions are never fed back during training.

Model ``f_n`` (1-based, ``models[n-1]``) takes ``kappa(n-1)`` and predicts the
level ``n-1`` sub-goal, so ``f_1`` looks farthest ahead (``K`` steps). The
policy takes ``kappa(N)``. The GCSL baseline is the ``N = 0`` case of the same
policy type, conditioned on ``(s, e)``.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .dataset import GOAL_DIM, KappaData, NormStats, RelabelSpec, gcsl_dataset, sample_indices
from .envs import ACTION_DIM, STATE_DIM
from .errors import ConfigError, FormatError, TrainingError
from .nn import (
    AdamState,
    Mlp,
    TrainSchedule,
    adam_step,
    cosine_lr,
    gaussian_nll_as_mse,
    mlp_backward,
    mlp_forward,
    mlp_from_bytes,
    mlp_init,
    mlp_to_bytes,
    model_nbytes,
)

BUNDLE_MAGIC = b"RSPB1"


@dataclass
class TrainConfig:
    total_steps: int = 10_000
    batch_size: int = 16384
    lr_max: float = 1e-3
    dropout: float = 0.0
    hidden: tuple = (1024, 1024)
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if len(self.hidden) != 2:
            raise ConfigError(f"exactly two hidden layers are supported, got {self.hidden}")
        if min(self.total_steps, self.batch_size, *self.hidden) <= 0 or self.lr_max <= 0:
            raise ConfigError("total_steps, batch_size, hidden dims and lr_max must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")

    @classmethod
    def desk(cls, **kw) -> "TrainConfig":
        """Desk-scale preset: [256, 256] hidden units, a 256-sample batch and dropout 0.1.

        Desk datasets are small, so this follows the small-data column of the
        reference hyperparameters (batch 256, dropout 0.1) rather than the
        16384 batch used for the large offline datasets.
        """
        kw.setdefault("hidden", (256, 256))
        kw.setdefault("batch_size", 256)
        kw.setdefault("dropout", 0.1)
        return cls(**kw)


@dataclass
class DynamicsStack:
    models: list
    spec: RelabelSpec
    norm: NormStats
    state_dim: int = STATE_DIM
    goal_dim: int = GOAL_DIM

    def __post_init__(self):
        if len(self.models) != self.spec.N:
            raise ConfigError(f"stack has {len(self.models)} models but N={self.spec.N}")
        for n, m in enumerate(self.models, start=1):
            want = self.state_dim * n + self.goal_dim
            if m.in_dim != want or m.out_dim != self.state_dim:
                raise ConfigError(
                    f"model f_{n} maps {m.in_dim}->{m.out_dim}, expected {want}->{self.state_dim}"
                )


@dataclass
class GoalPolicy:
    net: Mlp
    norm: NormStats
    n_levels: int  # N; 0 for the flat GCSL policy
    state_dim: int = STATE_DIM
    goal_dim: int = GOAL_DIM

    def __post_init__(self):
        want = self.state_dim * (self.n_levels + 1) + self.goal_dim
        if self.net.in_dim != want or self.net.out_dim != ACTION_DIM:
            raise ConfigError(f"policy maps {self.net.in_dim}->{self.net.out_dim}, expected {want}->{ACTION_DIM}")


@dataclass
class LossTrace:
    names: list
    losses: np.ndarray  # (steps, n_models)

    def smoothed(self, window: int = 100) -> np.ndarray:
        c = np.cumsum(np.vstack([np.zeros(self.losses.shape[1]), self.losses]), axis=0)
        out = np.empty_like(self.losses)
        for i in range(len(self.losses)):
            lo = max(0, i + 1 - window)
            out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
        return out

    def to_csv(self, path_or_buf, every: int = 1) -> None:
        own = isinstance(path_or_buf, (str, bytes)) or hasattr(path_or_buf, "__fspath__")
        f = open(path_or_buf, "w", newline="") if own else path_or_buf
        try:
            w = csv.writer(f)
            w.writerow(["step", "model_id", "loss"])
            for step in range(0, len(self.losses), every):
                for j, name in enumerate(self.names):
                    w.writerow([step, name, f"{self.losses[step, j]:.8g}"])
        finally:
            if own:
                f.close()


@dataclass
class _Head:
    name: str
    net: Mlp
    x: np.ndarray  # full normalised input matrix
    y: np.ndarray  # full target matrix
    opt: AdamState = None
    rng: np.random.Generator = None


def _seed(cfg_seed, *tags):
    return np.random.default_rng([int(cfg_seed), *tags])


def _run(heads: list[_Head], cfg: TrainConfig, n_rows: int, batch_rng) -> LossTrace:
    """Joint loop: one batch per iteration, one Adam step per head on that batch."""
    sched = TrainSchedule(cfg.total_steps, cfg.lr_max)
    losses = np.empty((cfg.total_steps, len(heads)))
    for h in heads:
        h.opt = AdamState.zeros_like(h.net.params())
    for step in range(cfg.total_steps):
        idx = sample_indices(n_rows, cfg.batch_size, batch_rng)
        lr = cosine_lr(step, sched)
        for j, h in enumerate(heads):
            out, cache = mlp_forward(h.net, h.x[idx], train_mode=True, rng=h.rng)
            loss, d = gaussian_nll_as_mse(out, h.y[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss in {h.name}", step)
            grads = mlp_backward(h.net, cache, d)
            adam_step(h.net.params(), grads, h.opt, lr, step_index=step)
            losses[step, j] = loss
    return LossTrace([h.name for h in heads], losses)


def _dims(hidden, n_in, n_out):
    return [n_in, *hidden, n_out]


def _normalised_columns(data: KappaData, norm: NormStats):
    s = norm.norm_state(data.s)
    sub = norm.norm_state(data.subgoals)
    g = norm.norm_goal(data.g)
    return s, sub, g


def _kappa_matrix(s, sub, g, n):
    N = sub.shape[1]
    return np.ascontiguousarray(np.concatenate([s] + [sub[:, j] for j in range(N - n, N)] + [g], axis=1))


def _dynamics_heads(data, norm, cfg, spec, s, sub, g):
    heads = []
    for n in range(1, spec.N + 1):
        net = mlp_init(_dims(cfg.hidden, STATE_DIM * n + GOAL_DIM, STATE_DIM), seed=_seed(cfg.seed, 0, n).integers(2**31),
                       dropout_rate=cfg.dropout)
        x = _kappa_matrix(s, sub, g, n - 1)
        y = np.ascontiguousarray(sub[:, spec.N - n])
        heads.append(_Head(f"f{n}", net, x, y, rng=_seed(cfg.seed, 3, n)))
    return heads


def _policy_head(data, norm, cfg, spec, s, sub, g):
    net = mlp_init(_dims(cfg.hidden, STATE_DIM * (spec.N + 1) + GOAL_DIM, ACTION_DIM),
                   seed=_seed(cfg.seed, 1).integers(2**31), dropout_rate=cfg.dropout)
    return _Head("pi", net, _kappa_matrix(s, sub, g, spec.N), np.ascontiguousarray(data.a, dtype=np.float32),
                 rng=_seed(cfg.seed, 3, 0))


def _check(data: KappaData, spec: RelabelSpec):
    if data.spec.N != spec.N or data.subgoals.shape[1] != spec.N:
        raise ConfigError(f"samples carry {data.subgoals.shape[1]} sub-goal levels but spec has N={spec.N}")
    if data.s.shape[1] != STATE_DIM or data.g.shape[1] != GOAL_DIM:
        raise ConfigError("sample dimensions do not match the environment")


def train_rsp(data: KappaData, cfg: TrainConfig, norm: NormStats, spec: RelabelSpec | None = None,
              dynamics: bool = True, policy: bool = True):
    """Train the dynamics stack and/or policy jointly on shared batches.

    Returns ``(stack or None, policy or None, trace)``. Heads never interact,
    so training a subset reproduces the joint run's parameters exactly.
    """
    spec = spec or data.spec
    _check(data, spec)
    s, sub, g = _normalised_columns(data, norm)
    heads = []
    if dynamics:
        heads += _dynamics_heads(data, norm, cfg, spec, s, sub, g)
    if policy:
        heads.append(_policy_head(data, norm, cfg, spec, s, sub, g))
    if not heads:
        raise ConfigError("nothing to train")
    trace = _run(heads, cfg, len(data), _seed(cfg.seed, 2))
    stack = DynamicsStack([h.net for h in heads[: spec.N]], spec, norm) if dynamics else None
    pol = GoalPolicy(heads[-1].net, norm, spec.N) if policy else None
    return stack, pol, trace


def train_dynamics_stack(data: KappaData, cfg: TrainConfig, norm: NormStats, spec: RelabelSpec | None = None):
    stack, _, trace = train_rsp(data, cfg, norm, spec, dynamics=True, policy=False)
    return stack, trace


def train_policy(data: KappaData, cfg: TrainConfig, norm: NormStats, spec: RelabelSpec | None = None):
    _, pol, trace = train_rsp(data, cfg, norm, spec, dynamics=False, policy=True)
    return pol, trace


def train_gcsl(trajs, cfg: TrainConfig, norm: NormStats):
    """Flat goal-conditioned policy on hindsight-relabeled ``(s, a, e)`` tuples."""
    s, a, e = gcsl_dataset(trajs, _seed(cfg.seed, 4))
    x = np.ascontiguousarray(np.concatenate([norm.norm_state(s), norm.norm_goal(e)], axis=1))
    net = mlp_init(_dims(cfg.hidden, STATE_DIM + GOAL_DIM, ACTION_DIM), seed=_seed(cfg.seed, 1).integers(2**31),
                   dropout_rate=cfg.dropout)
    head = _Head("gcsl", net, x, np.ascontiguousarray(a, dtype=np.float32), rng=_seed(cfg.seed, 3, 0))
    trace = _run([head], cfg, len(x), _seed(cfg.seed, 2))
    return GoalPolicy(net, norm, 0), trace


# --- bundles -------------------------------------------------------------------


@dataclass
class Bundle:
    stack: DynamicsStack | None
    policy: GoalPolicy
    spec: RelabelSpec | None
    norm: NormStats
    meta: dict = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "gcsl" if self.stack is None else "rsp"


def _bundle_header(b: Bundle) -> dict:
    models = ([] if b.stack is None else b.stack.models) + [b.policy.net]
    return {
        "kind": b.kind,
        "spec": None if b.spec is None else b.spec.to_dict(),
        "state_dim": STATE_DIM,
        "action_dim": ACTION_DIM,
        "goal_dim": GOAL_DIM,
        "n_models": len(models),
        "model_dims": [list(m.layer_dims) for m in models],
        "norm": b.norm.to_dict(),
        "meta": b.meta,
    }


def bundle_bytes(b: Bundle) -> bytes:
    raw = json.dumps(_bundle_header(b), sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(BUNDLE_MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    models = ([] if b.stack is None else b.stack.models) + [b.policy.net]
    for i, m in enumerate(models):
        buf.write(mlp_to_bytes(m, {"index": i}))
    return buf.getvalue()


def bundle_nbytes(header_len: int, model_dims, model_header_lens) -> int:
    """Closed-form bundle size from the outer header and per-model header lengths."""
    return len(BUNDLE_MAGIC) + 4 + header_len + sum(
        model_nbytes(d, h) for d, h in zip(model_dims, model_header_lens)
    )


def save_bundle(path, b: Bundle) -> None:
    data = bundle_bytes(b)
    with open(path, "wb") as f:
        f.write(data)


def parse_bundle(data: bytes) -> Bundle:
    if data[: len(BUNDLE_MAGIC)] != BUNDLE_MAGIC:
        raise FormatError("bad bundle magic at offset 0")
    pos = len(BUNDLE_MAGIC)
    if len(data) < pos + 4:
        raise FormatError(f"truncated header length at offset {pos}")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        kind = header["kind"]
        n_models = int(header["n_models"])
        norm = NormStats.from_dict(header["norm"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable bundle header at offset {pos}: {exc}") from None
    pos += hlen
    spec = None
    if kind == "rsp":
        try:
            spec = RelabelSpec(**header["spec"])
        except (ConfigError, TypeError, KeyError) as exc:
            raise FormatError(f"field 'spec': {exc}") from None
        if n_models != spec.N + 1:
            raise FormatError(f"field 'n_models'={n_models} disagrees with spec N={spec.N}")
    elif kind == "gcsl":
        if n_models != 1:
            raise FormatError(f"field 'n_models'={n_models}, a gcsl bundle holds one model")
    else:
        raise FormatError(f"field 'kind': unknown bundle kind {kind!r}")
    models = []
    for i in range(n_models):
        net, _, pos = mlp_from_bytes(data, pos)
        models.append(net)
    if pos != len(data):
        raise FormatError(f"trailing bytes after last model at offset {pos}")
    if [list(m.layer_dims) for m in models] != header.get("model_dims"):
        raise FormatError("field 'model_dims' disagrees with stored models")
    try:
        stack = DynamicsStack(models[:-1], spec, norm) if kind == "rsp" else None
        pol = GoalPolicy(models[-1], norm, 0 if spec is None else spec.N)
    except ConfigError as exc:
        raise FormatError(f"field 'model_dims': {exc}") from None
    return Bundle(stack, pol, spec, norm, header.get("meta", {}))


def load_bundle(path) -> Bundle:
    with open(path, "rb") as f:
        return parse_bundle(f.read())
