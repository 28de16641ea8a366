"""Discrete maze world with egocentric ray-cast observations and an A* planner.

Coordinates: ``x`` is the column, ``y`` the row (growing downwards). Headings
are North, East, South, West = 0, 1, 2, 3.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from enum import IntEnum
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

FREE, WALL, GOAL = 0, 1, 2
_CHARS = {".": FREE, "#": WALL, "G": GOAL}

STEP_REWARD = -0.04
COLLISION_PENALTY = -0.96
GOAL_REWARD = 1.0

BUILTIN_MAPS = ("map1", "map2", "map3", "map4")


class Heading(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3


class Action(IntEnum):
    STAND = 0
    TURN_LEFT = 1
    TURN_RIGHT = 2
    FORWARD = 3


N_ACTIONS = len(Action)
# unit moves per heading, in (dx, dy)
_MOVES = ((0, -1), (1, 0), (0, 1), (-1, 0))
# planner expansion order doubles as the tie-break rule
PLAN_ORDER = (Action.FORWARD, Action.TURN_LEFT, Action.TURN_RIGHT)
_PLAN_RANK = {a: i for i, a in enumerate(PLAN_ORDER)}


class MapError(ValueError):
    pass


class PlanningError(RuntimeError):
    pass


@dataclass(frozen=True)
class Pose:
    x: int
    y: int
    heading: int

    def turned(self, delta: int) -> "Pose":
        return Pose(self.x, self.y, (self.heading + delta) % 4)

    def ahead(self) -> tuple[int, int]:
        dx, dy = _MOVES[self.heading]
        return self.x + dx, self.y + dy


@dataclass(frozen=True, eq=False)
class MazeMap:
    cells: np.ndarray  # [height, width] of FREE/WALL/GOAL
    name: str = "map"
    goal: tuple[int, int] = field(init=False)

    def __post_init__(self):
        gy, gx = np.argwhere(self.cells == GOAL)[0]
        object.__setattr__(self, "goal", (int(gx), int(gy)))
        self.cells.setflags(write=False)

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    def __getitem__(self, xy: tuple[int, int]) -> int:
        x, y = xy
        return int(self.cells[y, x])

    def free_cells(self) -> list[tuple[int, int]]:
        """Free (non-goal) cells in row-major order."""
        ys, xs = np.nonzero(self.cells == FREE)
        return [(int(x), int(y)) for y, x in zip(ys, xs)]

    def start_poses(self) -> list[Pose]:
        return [Pose(x, y, h) for x, y in self.free_cells() for h in range(4)]

    def to_text(self) -> str:
        inv = {v: k for k, v in _CHARS.items()}
        return "\n".join("".join(inv[int(c)] for c in row) for row in self.cells) + "\n"

    def transposed(self) -> "MazeMap":
        return MazeMap(np.ascontiguousarray(self.cells.T), self.name + "_T")

    # identity semantics keep per-map caches cheap
    def __hash__(self):
        return id(self)

    def __eq__(self, other):
        return self is other


def load_map(text: str, name: str = "map") -> MazeMap:
    rows = [r.rstrip("\r") for r in text.split("\n")]
    while rows and rows[-1] == "":
        rows.pop()
    if not rows:
        raise MapError("empty map")
    width = len(rows[0])
    for i, r in enumerate(rows):
        if len(r) != width:
            raise MapError(f"ragged rows: row {i} has length {len(r)}, expected {width}")
    try:
        cells = np.array([[_CHARS[c] for c in r] for r in rows], dtype=np.int8)
    except KeyError as e:
        raise MapError(f"unknown map character {e.args[0]!r}") from None
    n_goal = int((cells == GOAL).sum())
    if n_goal != 1:
        raise MapError(f"map must contain exactly one goal 'G', found {n_goal}")
    border = np.concatenate([cells[0], cells[-1], cells[:, 0], cells[:, -1]])
    if np.any(border != WALL):
        raise MapError("open border: every border cell must be a wall")
    free = cells == FREE
    if not free.any():
        raise MapError("unreachable goal: map has no free start cell")
    # flood fill from the goal over free cells
    gy, gx = np.argwhere(cells == GOAL)[0]
    seen = np.zeros_like(free)
    seen[gy, gx] = True
    stack = [(gy, gx)]
    while stack:
        y, x = stack.pop()
        for dx, dy in _MOVES:
            ny, nx = y + dy, x + dx
            if free[ny, nx] and not seen[ny, nx]:
                seen[ny, nx] = True
                stack.append((ny, nx))
    cut_off = free & ~seen
    if cut_off.any():
        y, x = np.argwhere(cut_off)[0]
        raise MapError(f"unreachable goal from free cell ({x}, {y})")
    return MazeMap(cells, name)


def load_map_file(path) -> MazeMap:
    path = Path(path)
    return load_map(path.read_text(), path.stem)


def builtin_map(name: str) -> MazeMap:
    name = name.lower()
    if name not in BUILTIN_MAPS:
        raise MapError(f"unknown built-in map {name!r}; choose from {BUILTIN_MAPS}")
    return _builtin(name)


@lru_cache(maxsize=None)
def _builtin(name: str) -> MazeMap:
    text = resources.files("sfrl").joinpath("maps", f"{name}.txt").read_text()
    return load_map(text, name)


def resolve_map(spec: str) -> MazeMap:
    """A built-in map name (``map1``...) or a path to a map file."""
    if spec.lower() in BUILTIN_MAPS:
        return builtin_map(spec)
    return load_map_file(spec)


# --------------------------------------------------------------------------- dynamics

def reset(maze: MazeMap, rng) -> Pose:
    """Uniform start pose over free non-goal cells and the four headings."""
    rng = np.random.default_rng(rng)
    cells = maze.free_cells()
    i = int(rng.integers(len(cells) * 4))
    x, y = cells[i // 4]
    return Pose(x, y, i % 4)


def step(maze: MazeMap, pose: Pose, action: int, slip_prob: float = 0.0, rng=None):
    """Apply one action. Returns ``(pose, reward, terminal, collided)``.

    With probability ``slip_prob`` the action degrades to STAND.
    """
    if slip_prob > 0.0 and rng.random() < slip_prob:
        action = Action.STAND
    if action == Action.STAND:
        return pose, STEP_REWARD, False, False
    if action == Action.TURN_LEFT:
        return pose.turned(-1), STEP_REWARD, False, False
    if action == Action.TURN_RIGHT:
        return pose.turned(1), STEP_REWARD, False, False
    if action != Action.FORWARD:
        raise ValueError(f"invalid action {action!r}")
    nx, ny = pose.ahead()
    cell = maze[nx, ny]
    if cell == WALL:
        return pose, STEP_REWARD + COLLISION_PENALTY, False, True
    if cell == GOAL:
        return Pose(nx, ny, pose.heading), GOAL_REWARD, True, False
    return Pose(nx, ny, pose.heading), STEP_REWARD, False, False


# --------------------------------------------------------------------------- sensing

@dataclass(frozen=True)
class SensorConfig:
    rays: int = 16
    fov: float = 180.0  # degrees
    max_range: float = 10.0  # cell units

    @property
    def frame_dim(self) -> int:
        return 2 * self.rays


@dataclass
class Observation:
    rays: np.ndarray  # [R] normalized distance in [0, 1]
    goal_mask: np.ndarray  # [R] of {0, 1}

    def flat(self) -> np.ndarray:
        return np.concatenate([self.rays, self.goal_mask])


def _heading_angle(heading: int) -> float:
    # counter-clockwise from East with y pointing down the rows
    return (np.pi / 2, 0.0, -np.pi / 2, np.pi)[heading]


def _trace(maze: MazeMap, ox: float, oy: float, dx: float, dy: float, max_range: float):
    """Walk the grid from (ox, oy) along (dx, dy) until a wall cell is entered.

    Returns ``(distance, goal_seen)``; distance is capped at ``max_range``.
    """
    cx, cy = int(np.floor(ox)), int(np.floor(oy))
    step_x = 1 if dx > 0 else -1
    step_y = 1 if dy > 0 else -1
    inf = float("inf")
    t_dx = abs(1.0 / dx) if abs(dx) > 1e-12 else inf
    t_dy = abs(1.0 / dy) if abs(dy) > 1e-12 else inf
    t_x = ((cx + 1 - ox) if dx > 0 else (ox - cx)) * t_dx if t_dx < inf else inf
    t_y = ((cy + 1 - oy) if dy > 0 else (oy - cy)) * t_dy if t_dy < inf else inf
    goal_seen = False
    while True:
        if t_x <= t_y:
            t = t_x
            cx += step_x
            t_x += t_dx
        else:
            t = t_y
            cy += step_y
            t_y += t_dy
        if t >= max_range:
            return max_range, goal_seen
        cell = maze[cx, cy]
        if cell == WALL:
            return t, goal_seen
        if cell == GOAL:
            goal_seen = True


def observe(maze: MazeMap, pose: Pose, rays: int = 16, fov: float = 180.0,
            max_range: float = 10.0) -> Observation:
    """Ray-cast reading from the cell centre; rays ordered left to right."""
    if rays < 2:
        raise ValueError("need at least two rays")
    base = _heading_angle(pose.heading)
    half = np.deg2rad(fov) / 2
    angles = base + np.linspace(half, -half, rays)
    ox, oy = pose.x + 0.5, pose.y + 0.5
    dist = np.empty(rays)
    mask = np.zeros(rays)
    for j, a in enumerate(angles):
        d, g = _trace(maze, ox, oy, np.cos(a), -np.sin(a), max_range)
        dist[j] = d
        mask[j] = float(g)
    return Observation(np.clip(dist / max_range, 0.0, 1.0), mask)


@lru_cache(maxsize=64)
def observation_table(maze: MazeMap, sensor: SensorConfig = SensorConfig()) -> np.ndarray:
    """Flat observations for every cell and heading: ``[height, width, 4, 2R]``."""
    table = np.zeros((maze.height, maze.width, 4, sensor.frame_dim))
    for y in range(maze.height):
        for x in range(maze.width):
            if maze[x, y] == WALL:
                continue
            for h in range(4):
                table[y, x, h] = observe(maze, Pose(x, y, h), sensor.rays, sensor.fov,
                                         sensor.max_range).flat()
    table.setflags(write=False)
    return table


# --------------------------------------------------------------------------- planning

def _successor(maze: MazeMap, pose: Pose, action: int) -> Pose:
    nxt, _, _, _ = step(maze, pose, action)
    return nxt


def shortest_path(maze: MazeMap, start: Pose) -> list[Action]:
    """A* over (x, y, heading) with unit action costs.

    Among equally short plans the lexicographically smallest under the order
    FORWARD < TURN_LEFT < TURN_RIGHT is returned.
    """
    gx, gy = maze.goal
    if maze[start.x, start.y] == GOAL:
        return []

    def h(p: Pose) -> int:
        dx, dy = gx - p.x, gy - p.y
        # at least one turn unless the goal lies on the ray ahead
        ax, ay = _MOVES[p.heading]
        aligned = (dx * ay == dy * ax) and (dx * ax + dy * ay) > 0
        return abs(dx) + abs(dy) + (0 if aligned else 1)

    # priority (f, action ranks so far) gives the lexicographic tie-break
    heap = [(h(start), (), start, ())]
    closed = set()
    while heap:
        f, ranks, pose, plan = heapq.heappop(heap)
        if pose in closed:
            continue
        closed.add(pose)
        if maze[pose.x, pose.y] == GOAL:
            return list(plan)
        g = len(plan)
        for a in PLAN_ORDER:
            nxt = _successor(maze, pose, a)
            if nxt == pose or nxt in closed:
                continue
            heapq.heappush(heap, (g + 1 + (0 if maze[nxt.x, nxt.y] == GOAL else h(nxt)),
                                  ranks + (_PLAN_RANK[a],), nxt, plan + (a,)))
    raise PlanningError(f"goal unreachable from {start}")


@lru_cache(maxsize=64)
def policy_table(maze: MazeMap) -> dict[Pose, tuple[Action, int]]:
    """Planner action and plan length for every non-goal pose."""
    return {p: ((plan := shortest_path(maze, p))[0], len(plan)) for p in maze.start_poses()}


def optimal_action(maze: MazeMap, pose: Pose) -> Action:
    return policy_table(maze)[pose][0]


def optimal_steps(maze: MazeMap, pose: Pose) -> int:
    return policy_table(maze)[pose][1]


# --------------------------------------------------------------------------- episodes

@dataclass
class StepResult:
    state: np.ndarray  # flattened frame stack, oldest frame first
    reward: float
    terminal: bool
    collided: bool
    pose: Pose
    truncated: bool = False


class MazeEnv:
    """Episode wrapper: frame stacking, slip noise and the step limit."""

    def __init__(self, maze: MazeMap, sensor: SensorConfig = SensorConfig(), history: int = 4,
                 slip_prob: float = 0.0, max_steps: int = 200, rng=None):
        self.maze = maze
        self.sensor = sensor
        self.history = history
        self.slip_prob = slip_prob
        self.max_steps = max_steps
        self.rng = np.random.default_rng(rng)
        self.table = observation_table(maze, sensor)
        self.pose: Pose | None = None
        self.t = 0
        self._frames: np.ndarray | None = None

    @property
    def state_dim(self) -> int:
        return self.history * self.sensor.frame_dim

    def frame(self, pose: Pose) -> np.ndarray:
        return self.table[pose.y, pose.x, pose.heading]

    def initial_state(self, pose: Pose) -> np.ndarray:
        return np.tile(self.frame(pose), self.history)

    def reset(self, pose: Pose | None = None):
        self.pose = reset(self.maze, self.rng) if pose is None else pose
        self.t = 0
        self._frames = self.initial_state(self.pose)
        return self._frames.copy(), self.pose

    def step(self, action: int) -> StepResult:
        pose, reward, terminal, collided = step(self.maze, self.pose, action, self.slip_prob, self.rng)
        self.pose = pose
        self.t += 1
        d = self.sensor.frame_dim
        frames = np.empty_like(self._frames)
        frames[:-d] = self._frames[d:]
        frames[-d:] = self.frame(pose)
        self._frames = frames
        truncated = not terminal and self.t >= self.max_steps
        return StepResult(frames.copy(), reward, terminal, collided, pose, truncated)
