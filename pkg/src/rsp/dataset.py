"""Trajectory files, normalisation, skip-step relabeling and batch sampling.

Relabeling attaches ``N`` sub-goal ground truths to every timestep. Level ``n``
(``0 <= n < N``) sits ``K / 2**n`` steps ahead, so level 0 is the farthest and
level ``N-1`` the nearest, ``k = K / 2**(N-1)`` steps ahead. Indices past the
end of a trajectory clamp to its final state.

Sub-goals are always stored nearest first, which makes the conditioning tuple
for the first ``n`` levels

    kappa(n) = (s_t, subgoals[N-n], ..., subgoals[N-1], g)

i.e. a suffix of the sub-goal list sandwiched between ``s_t`` and ``g``.
"""
from __future__ import annotations

import io
import json
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .envs import ACTION_DIM, GOAL_DIM, STATE_DIM, Trajectory
from .errors import ConfigError, FormatError

DATASET_MAGIC = b"RSPD1"
STD_FLOOR = 1e-6
GOAL_MODES = ("final_state", "future_random")


@dataclass(frozen=True)
class RelabelSpec:
    K: int = 32
    N: int = 1
    goal_mode: str = "final_state"

    def __post_init__(self):
        if int(self.K) != self.K or int(self.N) != self.N or self.K < 1 or self.N < 1:
            raise ConfigError(f"K and N must be positive integers, got K={self.K}, N={self.N}")
        if self.K % (2 ** (self.N - 1)):
            raise ConfigError(
                f"K={self.K} must be divisible by 2^(N-1)={2 ** (self.N - 1)} so the lowest horizon is integral"
            )
        if self.goal_mode not in GOAL_MODES:
            raise ConfigError(f"goal_mode must be one of {GOAL_MODES}, got {self.goal_mode!r}")

    @property
    def k(self) -> int:
        return self.K // 2 ** (self.N - 1)

    @property
    def label(self) -> str:
        """Config label listing horizons nearest first, e.g. ``[8,16,32]``."""
        return "[" + ",".join(str(h) for h in reversed(horizons(self))) + "]"

    def to_dict(self):
        return {"K": self.K, "N": self.N, "goal_mode": self.goal_mode}


def horizons(spec: RelabelSpec) -> list[int]:
    """Offsets of levels 0..N-1 from t: ``[K, K/2, ..., K/2**(N-1)]``."""
    if spec.K % (2 ** (spec.N - 1)):
        raise ConfigError(f"K={spec.K} not divisible by 2^(N-1)")
    return [spec.K // 2**n for n in range(spec.N)]


@dataclass
class KappaSample:
    s_t: np.ndarray
    a_t: np.ndarray
    subgoals: list  # N state vectors, nearest horizon first
    g: np.ndarray

    def kappa(self, n: int) -> np.ndarray:
        """Flattened kappa(n) for ``0 <= n <= N``."""
        N = len(self.subgoals)
        if not 0 <= n <= N:
            raise ConfigError(f"kappa level {n} outside [0, {N}]")
        return np.concatenate([self.s_t, *self.subgoals[N - n :], self.g])


def subgoal_indices(T: int, spec: RelabelSpec) -> np.ndarray:
    """``(T, N)`` array of sub-goal indices, nearest level first."""
    t = np.arange(T)[:, None]
    offs = np.array(horizons(spec)[::-1])[None, :]
    return np.minimum(t + offs, T - 1)


def _goal_indices(T: int, spec: RelabelSpec, rng) -> np.ndarray:
    if spec.goal_mode == "final_state":
        return np.full(T, T - 1)
    lo = np.minimum(np.arange(T) + spec.K, T - 1)
    return lo + (rng.random(T) * (T - lo)).astype(np.intp)


def relabel_trajectory(traj: Trajectory, spec: RelabelSpec, rng=None) -> list[KappaSample]:
    """One :class:`KappaSample` per timestep of ``traj``."""
    T = len(traj)
    if T < 2:
        warnings.warn(f"skipping trajectory with {T} state(s)")
        return []
    rng = np.random.default_rng() if rng is None else rng
    sub = subgoal_indices(T, spec)
    gi = _goal_indices(T, spec, rng)
    S, A = traj.states, traj.actions
    return [KappaSample(S[t], A[t], [S[j] for j in sub[t]], S[gi[t], :GOAL_DIM]) for t in range(T)]


@dataclass
class KappaData:
    """Column-stacked relabeled samples for a whole dataset."""

    s: np.ndarray  # (M, sd)
    a: np.ndarray  # (M, ad)
    subgoals: np.ndarray  # (M, N, sd) nearest first
    g: np.ndarray  # (M, gd)
    spec: RelabelSpec
    traj_index: np.ndarray  # (M,)
    t_index: np.ndarray  # (M,)

    def __len__(self):
        return len(self.s)

    def kappa(self, n: int, idx=None) -> np.ndarray:
        sl = slice(None) if idx is None else idx
        N = self.spec.N
        if not 0 <= n <= N:
            raise ConfigError(f"kappa level {n} outside [0, {N}]")
        parts = [self.s[sl]] + [self.subgoals[sl, j] for j in range(N - n, N)] + [self.g[sl]]
        return np.concatenate(parts, axis=1)

    def target(self, n: int, idx=None) -> np.ndarray:
        """Ground truth for dynamics level ``n`` (1-based): the sub-goal at level n-1."""
        sl = slice(None) if idx is None else idx
        return self.subgoals[sl, self.spec.N - n]


def relabel_dataset(trajs, spec: RelabelSpec, rng=None) -> KappaData:
    rng = np.random.default_rng(0) if rng is None else rng
    s, a, sub, g, ti, tt = [], [], [], [], [], []
    for i, traj in enumerate(trajs):
        T = len(traj)
        if T < 2:
            warnings.warn(f"skipping trajectory {i} with {T} state(s)")
            continue
        S = traj.states
        s.append(S)
        a.append(traj.actions)
        sub.append(S[subgoal_indices(T, spec)])
        g.append(S[_goal_indices(T, spec, rng), :GOAL_DIM])
        ti.append(np.full(T, i))
        tt.append(np.arange(T))
    if not s:
        raise ConfigError("no usable trajectories to relabel")
    cat = np.concatenate
    return KappaData(cat(s), cat(a), cat(sub), cat(g), spec, cat(ti), cat(tt))


def gcsl_relabel(traj: Trajectory, rng):
    """``(s, a, e)`` with ``e`` the position of a uniform future index in ``(t, T-1]``.

    The final timestep has no future and is dropped.
    """
    T = len(traj)
    if T < 2:
        warnings.warn(f"skipping trajectory with {T} state(s)")
        z = np.zeros((0, STATE_DIM), np.float32)
        return z, np.zeros((0, ACTION_DIM), np.float32), np.zeros((0, GOAL_DIM), np.float32)
    t = np.arange(T - 1)
    future = t + 1 + (rng.random(T - 1) * (T - 1 - t)).astype(np.intp)
    return traj.states[:-1], traj.actions[:-1], traj.states[future, :GOAL_DIM]


def gcsl_dataset(trajs, rng):
    parts = [gcsl_relabel(tr, rng) for tr in trajs]
    parts = [p for p in parts if len(p[0])]
    if not parts:
        raise ConfigError("no usable trajectories to relabel")
    return tuple(np.concatenate(col) for col in zip(*parts))


# --- normalisation -----------------------------------------------------------


@dataclass
class NormStats:
    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    def norm_state(self, x):
        return ((np.asarray(x, np.float64) - self.state_mean) / self.state_std).astype(np.float32)

    def denorm_state(self, z):
        return (np.asarray(z, np.float64) * self.state_std + self.state_mean).astype(np.float32)

    def norm_goal(self, g):
        return ((np.asarray(g, np.float64) - self.state_mean[:GOAL_DIM]) / self.state_std[:GOAL_DIM]).astype(
            np.float32
        )

    def to_dict(self):
        return {k: [float(v) for v in getattr(self, k)] for k in ("state_mean", "state_std", "action_mean", "action_std")}

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.array(d[k], dtype=np.float64) for k in ("state_mean", "state_std", "action_mean", "action_std")))

    def __eq__(self, other):
        return isinstance(other, NormStats) and self.to_dict() == other.to_dict()


def _mean_std(x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    mean = x.mean(axis=0)
    std = np.sqrt(np.mean((x - mean) ** 2, axis=0))
    return mean, np.maximum(std, STD_FLOOR)


def fit_normalizer(trajs) -> NormStats:
    trajs = list(trajs)
    if not trajs or sum(len(t) for t in trajs) == 0:
        raise ConfigError("cannot fit a normaliser on an empty dataset")
    sm, ss = _mean_std(np.concatenate([t.states for t in trajs]))
    am, as_ = _mean_std(np.concatenate([t.actions for t in trajs]))
    return NormStats(sm, ss, am, as_)


# --- sampling ----------------------------------------------------------------


@dataclass
class Batch:
    s: np.ndarray
    a: np.ndarray
    subgoals: list  # per level, nearest first
    g: np.ndarray
    index: np.ndarray


def sample_indices(n: int, batch_size: int, rng) -> np.ndarray:
    if n == 0:
        raise ConfigError("cannot sample from an empty dataset")
    return rng.integers(0, n, size=batch_size)


def sample_batch(data: KappaData, batch_size: int, rng) -> Batch:
    """Uniform sampling with replacement; sub-goal columns grouped per level."""
    idx = sample_indices(len(data), batch_size, rng)
    sub = data.subgoals[idx]
    return Batch(data.s[idx], data.a[idx], [sub[:, j] for j in range(sub.shape[1])], data.g[idx], idx)


# --- RSPD1 files ---------------------------------------------------------------


def dataset_nbytes(header_len: int, lengths, state_dim=STATE_DIM, action_dim=ACTION_DIM) -> int:
    """File size implied by a header of ``header_len`` bytes and trajectory lengths."""
    return len(DATASET_MAGIC) + 4 + header_len + 4 * int(sum(lengths)) * (state_dim + action_dim)


def dataset_bytes(trajs, norm: NormStats | None = None) -> bytes:
    trajs = list(trajs)
    norm = norm or fit_normalizer(trajs)
    header = {
        "state_dim": STATE_DIM,
        "action_dim": ACTION_DIM,
        "goal_dim": GOAL_DIM,
        "n_traj": len(trajs),
        "lengths": [len(t) for t in trajs],
        "norm": norm.to_dict(),
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)
    for t in trajs:
        buf.write(np.ascontiguousarray(t.states, dtype="<f4").tobytes())
    for t in trajs:
        buf.write(np.ascontiguousarray(t.actions, dtype="<f4").tobytes())
    return buf.getvalue()


def write_dataset(path, trajs, norm: NormStats | None = None) -> None:
    data = dataset_bytes(trajs, norm)
    with open(path, "wb") as f:
        f.write(data)


def parse_dataset(data: bytes):
    if data[: len(DATASET_MAGIC)] != DATASET_MAGIC:
        raise FormatError("bad dataset magic at offset 0")
    pos = len(DATASET_MAGIC)
    if len(data) < pos + 4:
        raise FormatError(f"truncated header length at offset {pos}")
    (hlen,) = struct.unpack_from("<I", data, pos)
    pos += 4
    if len(data) < pos + hlen:
        raise FormatError(f"truncated header at offset {pos}")
    try:
        header = json.loads(data[pos : pos + hlen].decode("utf-8"))
        sd, ad, gd = int(header["state_dim"]), int(header["action_dim"]), int(header["goal_dim"])
        lengths = [int(n) for n in header["lengths"]]
        norm = NormStats.from_dict(header["norm"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable dataset header at offset {pos}: {exc}") from None
    if (sd, ad, gd) != (STATE_DIM, ACTION_DIM, GOAL_DIM):
        raise FormatError(f"dimension mismatch in header at offset {pos}: got {(sd, ad, gd)}")
    if int(header.get("n_traj", len(lengths))) != len(lengths):
        raise FormatError(f"n_traj disagrees with lengths list in header at offset {pos}")
    if len(norm.state_mean) != sd or len(norm.action_mean) != ad:
        raise FormatError(f"normaliser dimension mismatch in header at offset {pos}")
    pos += hlen
    expected = dataset_nbytes(hlen, lengths, sd, ad)
    if len(data) != expected:
        raise FormatError(f"payload size mismatch: file has {len(data)} bytes, header implies {expected} (offset {min(len(data), expected)})")
    total = sum(lengths)
    states = np.frombuffer(data, dtype="<f4", count=total * sd, offset=pos).reshape(total, sd)
    actions = np.frombuffer(data, dtype="<f4", count=total * ad, offset=pos + 4 * total * sd).reshape(total, ad)
    bounds = np.cumsum([0] + lengths)
    trajs = [
        Trajectory(states[b0:b1].astype(np.float32), actions[b0:b1].astype(np.float32))
        for b0, b1 in zip(bounds[:-1], bounds[1:])
    ]
    return trajs, norm


def read_dataset(path):
    """Returns ``(trajectories, norm_stats)``."""
    with open(path, "rb") as f:
        return parse_dataset(f.read())
