"""2-D point-mass mazes, a deterministic stepper and scripted data collectors.

Coordinates: ``x`` runs along columns and ``y`` along rows, in cell units.
Cell ``(row, col)`` covers ``[col, col+1) x [row, row+1)``. A state is the
float32 vector ``(x, y, vx, vy)`` and an action is ``(ax, ay)`` in ``[-1, 1]``.

The agent is a small axis-aligned box of half-width ``MARGIN`` centred on its
position. Each step:

    v' = clip(v + a * DT, -V_MAX, V_MAX)
    x' = x + v'x * DT   then resolve against walls along x
    y' = y + v'y * DT   then resolve against walls along y (using x')

If the box would overlap a wall cell along an axis, the coordinate is clamped
so the box touches the wall face (``face -/+ MARGIN``) and the velocity on that
axis is zeroed. All arithmetic is float32 so logged trajectories replay
bit-exactly.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .errors import ConfigError, LayoutError, StateError

DT = np.float32(0.5)
V_MAX = np.float32(1.0)
MARGIN = np.float32(0.125)  # power of two keeps face +/- margin exact in float32
GOAL_RADIUS = 0.5
STATE_DIM = 4
ACTION_DIM = 2
GOAL_DIM = 2


# --- layouts ----------------------------------------------------------------

# Block layouts, expanded by an integer scale so that corridors are several
# cells wide. 'S' and 'G' mark the designated start and goal blocks.
_BLOCKS = {
    "umaze": (
        """
        #####
        #S..#
        ###.#
        #G..#
        #####
        """,
        2,
    ),
    "medium": (
        """
        ########
        #S.##..#
        #..#...#
        ##...###
        #..#...#
        #.#..#.#
        #...#.G#
        ########
        """,
        3,
    ),
    "large": (
        """
        ############
        #S...#.....#
        #.##.#.#.#.#
        #......#...#
        #.####.###.#
        #..#.#.....#
        ##.#.#.#.###
        #..#...#..G#
        ############
        """,
        4,
    ),
    # long serpentine: few branch points so desk-scale models can learn the route,
    # but the designated crossing needs over 1000 scripted steps
    "ultra": (
        """
        ################
        #S.............#
        ##############.#
        #..............#
        #.##############
        #..............#
        ##############.#
        #..............#
        #.##############
        #..............#
        ##############.#
        #..............#
        #.##############
        #.............G#
        ################
        """,
        5,
    ),
}


@dataclass(frozen=True)
class Maze:
    grid: np.ndarray  # bool, True = wall
    name: str = "custom"
    start_cell: tuple | None = None
    goal_cell: tuple | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def shape(self):
        return self.grid.shape

    def open_cells(self) -> np.ndarray:
        return np.argwhere(~self.grid)

    def is_wall(self, row, col):
        return self.grid[row, col]

    def cell_center(self, cell) -> np.ndarray:
        r, c = cell
        return np.array([c + 0.5, r + 0.5], dtype=np.float32)

    def cell_of(self, pos) -> tuple:
        return int(np.floor(pos[1])), int(np.floor(pos[0]))


def _validate(grid: np.ndarray) -> None:
    if grid.ndim != 2 or grid.shape[0] < 3 or grid.shape[1] < 3:
        raise LayoutError(f"layout must be at least 3x3, got {grid.shape}")
    if not (grid[0].all() and grid[-1].all() and grid[:, 0].all() and grid[:, -1].all()):
        raise LayoutError("layout border must be all walls")
    cells = np.argwhere(~grid)
    if len(cells) == 0:
        raise LayoutError("layout has no open cells")
    seen = np.zeros_like(grid)
    r0, c0 = cells[0]
    seen[r0, c0] = True
    queue = deque([(r0, c0)])
    while queue:
        r, c = queue.popleft()
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            nr, nc = r + dr, c + dc
            if not grid[nr, nc] and not seen[nr, nc]:
                seen[nr, nc] = True
                queue.append((nr, nc))
    if seen.sum() != len(cells):
        raise LayoutError(f"open region is disconnected ({int(seen.sum())} of {len(cells)} cells reachable)")


def maze_from_ascii(layout: str, name: str = "custom", start_cell=None, goal_cell=None) -> Maze:
    """Parse a rectangular grid of '#' (wall) and '.' (open)."""
    rows = [line.strip() for line in layout.strip("\n").splitlines() if line.strip()]
    if not rows:
        raise LayoutError("empty layout")
    width = len(rows[0])
    for i, row in enumerate(rows):
        if len(row) != width:
            raise LayoutError(f"ragged layout: row {i} has {len(row)} columns, expected {width}")
        bad = set(row) - {"#", "."}
        if bad:
            raise LayoutError(f"unexpected characters {sorted(bad)} in row {i}")
    grid = np.array([[ch == "#" for ch in row] for row in rows], dtype=bool)
    _validate(grid)
    grid.setflags(write=False)
    for cell in (start_cell, goal_cell):
        if cell is not None and grid[cell]:
            raise LayoutError(f"designated cell {cell} is a wall")
    return Maze(grid, name, start_cell, goal_cell)


def _expand(block_text: str, scale: int):
    rows = [line.strip() for line in block_text.strip("\n").splitlines() if line.strip()]
    start = goal = None
    out = []
    for i, row in enumerate(rows):
        line = ""
        for j, ch in enumerate(row):
            if ch == "S":
                start = (i, j)
            elif ch == "G":
                goal = (i, j)
            line += ("#" if ch == "#" else ".") * scale
        out += [line] * scale
    # walls stay one cell thick on the outside border
    out = out[scale - 1 : len(out) - scale + 1]
    out = [line[scale - 1 : len(line) - scale + 1] for line in out]
    centre = lambda b: (b[0] * scale - (scale - 1) + scale // 2, b[1] * scale - (scale - 1) + scale // 2)
    return "\n".join(out), centre(start), centre(goal)


PRESETS = ("corridor", "umaze", "medium", "large", "ultra")


def preset_layout(name: str):
    """Return ``(ascii_text, start_cell, goal_cell)`` for a named preset."""
    if name == "corridor":
        text = "#" * 66 + "\n#" + "." * 64 + "#\n" + "#" * 66
        return text, (1, 1), (1, 64)
    if name not in _BLOCKS:
        raise ConfigError(f"unknown maze preset {name!r}; choose from {', '.join(PRESETS)}")
    block, scale = _BLOCKS[name]
    return _expand(block, scale)


def make_maze(name: str) -> Maze:
    text, start, goal = preset_layout(name)
    return maze_from_ascii(text, name, start, goal)


def load_layout(path, name=None) -> Maze:
    with open(path, encoding="utf-8") as f:
        return maze_from_ascii(f.read(), name or str(path))


# --- states and stepping ------------------------------------------------------


@dataclass
class PointState:
    position: tuple
    velocity: tuple = (0.0, 0.0)

    def to_array(self) -> np.ndarray:
        return np.array([*self.position, *self.velocity], dtype=np.float32)

    @classmethod
    def from_array(cls, s) -> "PointState":
        s = np.asarray(s)
        return cls((s[0], s[1]), (s[2], s[3]))


@dataclass
class Goal:
    position: tuple
    radius: float = GOAL_RADIUS

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError(f"goal radius must be positive, got {self.radius}")


@dataclass
class Trajectory:
    states: np.ndarray  # (T, 4) float32
    actions: np.ndarray  # (T, 2) float32
    meta: dict = field(default_factory=dict, compare=False)  # in-memory only, never persisted

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        if len(self.states) != len(self.actions):
            raise ConfigError(f"{len(self.states)} states but {len(self.actions)} actions")

    def __len__(self):
        return len(self.states)

    @property
    def achieved_goal(self) -> np.ndarray:
        return self.states[-1, :GOAL_DIM]


def _box_blocked(grid, x, y):
    """True where the agent box centred at (x, y) overlaps a wall cell."""
    c_lo = np.floor(x - MARGIN).astype(np.intp)
    c_hi = np.ceil(x + MARGIN).astype(np.intp) - 1
    r_lo = np.floor(y - MARGIN).astype(np.intp)
    r_hi = np.ceil(y + MARGIN).astype(np.intp) - 1
    h, w = grid.shape
    c_lo, c_hi = np.clip(c_lo, 0, w - 1), np.clip(c_hi, 0, w - 1)
    r_lo, r_hi = np.clip(r_lo, 0, h - 1), np.clip(r_hi, 0, h - 1)
    return grid[r_lo, c_lo] | grid[r_lo, c_hi] | grid[r_hi, c_lo] | grid[r_hi, c_hi]


def valid_positions(maze: Maze, pos) -> np.ndarray:
    pos = np.asarray(pos, dtype=np.float32)
    x, y = pos[..., 0], pos[..., 1]
    h, w = maze.grid.shape
    inside = (x - MARGIN >= 0) & (y - MARGIN >= 0) & (x + MARGIN <= w) & (y + MARGIN <= h)
    return inside & ~_box_blocked(maze.grid, np.clip(x, 0, w), np.clip(y, 0, h))


def step_batch(maze: Maze, states, actions, check: bool = True) -> np.ndarray:
    """Vectorised :func:`env_step` over leading batch dimensions."""
    s = np.asarray(states, dtype=np.float32)
    a = np.clip(np.asarray(actions, dtype=np.float32), -1, 1).astype(np.float32)
    if check and not np.all(valid_positions(maze, s[..., :2])):
        raise StateError("state lies outside the open region")
    v = np.clip(s[..., 2:4] + a * DT, -V_MAX, V_MAX).astype(np.float32)
    vx, vy = v[..., 0].copy(), v[..., 1].copy()
    grid = maze.grid

    nx = (s[..., 0] + vx * DT).astype(np.float32)
    y = s[..., 1]
    hit = _box_blocked(grid, nx, y)
    if np.any(hit):
        right = np.ceil(nx + MARGIN).astype(np.float32) - MARGIN - np.float32(1.0)
        left = np.floor(nx - MARGIN).astype(np.float32) + np.float32(1.0) + MARGIN
        nx = np.where(hit, np.where(vx > 0, right, left), nx).astype(np.float32)
        vx = np.where(hit, np.float32(0.0), vx).astype(np.float32)

    ny = (y + vy * DT).astype(np.float32)
    hit = _box_blocked(grid, nx, ny)
    if np.any(hit):
        down = np.ceil(ny + MARGIN).astype(np.float32) - MARGIN - np.float32(1.0)
        up = np.floor(ny - MARGIN).astype(np.float32) + np.float32(1.0) + MARGIN
        ny = np.where(hit, np.where(vy > 0, down, up), ny).astype(np.float32)
        vy = np.where(hit, np.float32(0.0), vy).astype(np.float32)

    return np.stack([nx, ny, vx, vy], axis=-1).astype(np.float32)


def env_step(maze: Maze, s, a):
    """Advance one state. Accepts and returns the same type (PointState or array)."""
    as_point = isinstance(s, PointState)
    arr = s.to_array() if as_point else np.asarray(s, dtype=np.float32)
    out = step_batch(maze, arr[None], np.asarray(a, dtype=np.float32)[None])[0]
    return PointState.from_array(out) if as_point else out


def success(s, goal: Goal) -> bool:
    pos = s.position if isinstance(s, PointState) else np.asarray(s)[:GOAL_DIM]
    d = np.asarray(pos, dtype=np.float64) - np.asarray(goal.position, dtype=np.float64)
    return bool(np.hypot(d[0], d[1]) <= goal.radius)


def replay(maze: Maze, traj: Trajectory) -> np.ndarray:
    """Re-step ``traj.actions`` from ``traj.states[0]``; returns the regenerated states."""
    out = np.empty_like(traj.states)
    out[0] = traj.states[0]
    for t in range(1, len(traj)):
        out[t] = env_step(maze, out[t - 1], traj.actions[t - 1])
    return out


# --- shortest paths and scripted collection -----------------------------------

_MOVES = ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1))


def _graph(maze: Maze):
    if "graph" not in maze._cache:
        grid = maze.grid
        h, w = grid.shape
        idx = np.arange(h * w).reshape(h, w)
        rows, cols, wts = [], [], []
        for dr, dc in _MOVES:
            for r, c in maze.open_cells():
                nr, nc = r + dr, c + dc
                if grid[nr, nc]:
                    continue
                if dr and dc and (grid[r + dr, c] or grid[r, c + dc]):
                    continue  # no corner cutting
                rows.append(idx[r, c])
                cols.append(idx[nr, nc])
                wts.append(np.sqrt(2.0) if dr and dc else 1.0)
        maze._cache["graph"] = coo_matrix((wts, (rows, cols)), shape=(h * w, h * w)).tocsr()
    return maze._cache["graph"]


def next_hops(maze: Maze, target_cell):
    """Per-cell successor on a shortest 8-connected path toward ``target_cell``."""
    key = ("hops", tuple(target_cell))
    if key not in maze._cache:
        h, w = maze.grid.shape
        t = target_cell[0] * w + target_cell[1]
        dist, pred = dijkstra(_graph(maze), directed=True, indices=t, return_predecessors=True)
        # the graph is symmetric, so predecessors from the target are next hops toward it
        maze._cache[key] = (dist.reshape(h, w), pred)
        if len(maze._cache) > 512:
            maze._cache.pop(next(k for k in maze._cache if k != "graph"))
    return maze._cache[key]


def bfs_path_length(maze: Maze, a, b) -> int:
    """Number of 4-connected moves on a shortest path between two open cells."""
    grid = maze.grid
    dist = {tuple(a): 0}
    queue = deque([tuple(a)])
    while queue:
        r, c = queue.popleft()
        if (r, c) == tuple(b):
            return dist[(r, c)]
        for dr, dc in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            n = (r + dr, c + dc)
            if not grid[n] and n not in dist:
                dist[n] = dist[(r, c)] + 1
                queue.append(n)
    raise LayoutError(f"no path between {a} and {b}")


@dataclass
class Controller:
    """Proportional waypoint follower over shortest-path next hops."""

    lookahead: int = 3
    speed: float = 0.9
    gain: float = 1.0
    noise: float = 0.05

    def aim_point(self, maze: Maze, pos, target_pos, target_cell):
        _, pred = next_hops(maze, target_cell)
        h, w = maze.grid.shape
        r, c = maze.cell_of(pos)
        node = r * w + c
        tnode = target_cell[0] * w + target_cell[1]
        for _ in range(self.lookahead):
            if node == tnode:
                return np.asarray(target_pos, dtype=np.float64)
            node = pred[node]
            if node < 0:
                break
        if node == tnode:
            return np.asarray(target_pos, dtype=np.float64)
        return np.array([node % w + 0.5, node // w + 0.5])

    def action(self, maze: Maze, s, target_pos, target_cell, rng) -> np.ndarray:
        pos = s[:2].astype(np.float64)
        aim = self.aim_point(maze, pos, target_pos, target_cell)
        d = aim - pos
        dist = np.hypot(*d)
        v_des = np.zeros(2) if dist < 1e-9 else d / dist * min(self.speed, self.gain * dist)
        a = (v_des - s[2:4]) / float(DT) + self.noise * rng.standard_normal(2)
        return np.clip(a, -1, 1).astype(np.float32)


def random_open_position(maze: Maze, rng, cell=None) -> tuple:
    """Uniform position inside a (random or given) open cell, box fully inside it."""
    if cell is None:
        cells = maze.open_cells()
        cell = tuple(cells[rng.integers(len(cells))])
    lo, hi = float(MARGIN), 1.0 - float(MARGIN)
    pos = np.array([cell[1] + rng.uniform(lo, hi), cell[0] + rng.uniform(lo, hi)], dtype=np.float32)
    return pos, tuple(int(v) for v in cell)


def scripted_collect(maze: Maze, style: str = "diverse", n_traj: int = 100, max_len: int = 1000,
                     seed: int = 0, controller: Controller | None = None) -> list[Trajectory]:
    """Generate goal-directed trajectories with a noisy scripted controller.

    ``diverse``: one random target per trajectory, which ends on arrival.
    ``play``: a new random target is drawn on every arrival until ``max_len``.
    Each trajectory uses its own random stream seeded by ``(seed, index)``.
    """
    if style not in ("diverse", "play"):
        raise ConfigError(f"unknown collection style {style!r}")
    if n_traj <= 0 or max_len < 2:
        raise ConfigError("n_traj must be positive and max_len >= 2")
    ctrl = controller or Controller()
    cells = maze.open_cells()
    out = []
    for i in range(n_traj):
        rng = np.random.default_rng([seed, i])
        pos, _ = random_open_position(maze, rng)
        s = np.array([pos[0], pos[1], 0.0, 0.0], dtype=np.float32)
        target_cell = tuple(cells[rng.integers(len(cells))])
        target = maze.cell_center(target_cell)
        states, actions, targets = [], [], [target]
        while len(states) < max_len:
            a = ctrl.action(maze, s, target, target_cell, rng)
            states.append(s)
            actions.append(a)
            if np.hypot(*(s[:2].astype(np.float64) - target)) <= GOAL_RADIUS:
                if style == "diverse":
                    break
                target_cell = tuple(cells[rng.integers(len(cells))])
                target = maze.cell_center(target_cell)
                targets.append(target)
            s = step_batch(maze, s[None], a[None], check=False)[0]
        out.append(Trajectory(np.array(states), np.array(actions), {"targets": np.array(targets)}))
    return out
