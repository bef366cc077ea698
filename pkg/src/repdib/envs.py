"""6x6 maze navigation tasks with optional exogenous observation noise."""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

SIZE = 6
ACTIONS = ("up", "down", "left", "right")
MOVES = {0: (-1, 0), 1: (1, 0), 2: (0, -1), 3: (0, 1)}
LAYOUT_KINDS = ("grid", "spiral", "loop")
RENDER_MODES = ("onehot", "frame")
NOISE_MODES = ("off", "image", "video")
CELL_PX = 8
TILE = 16

Cell = tuple[int, int]
Edge = frozenset


class ContractError(RuntimeError):
    pass


def edge(a: Cell, b: Cell) -> Edge:
    return frozenset((tuple(a), tuple(b)))


def spiral_order(n: int = SIZE) -> list[Cell]:
    """Cells visited clockwise inward from the top-left corner."""
    top, bottom, left, right = 0, n - 1, 0, n - 1
    order: list[Cell] = []
    while top <= bottom and left <= right:
        order += [(top, c) for c in range(left, right + 1)]
        order += [(r, right) for r in range(top + 1, bottom + 1)]
        if top < bottom:
            order += [(bottom, c) for c in range(right - 1, left - 1, -1)]
        if left < right:
            order += [(r, left) for r in range(bottom - 1, top, -1)]
        top, bottom, left, right = top + 1, bottom - 1, left + 1, right - 1
    return order


def all_edges(n: int = SIZE) -> set[Edge]:
    out = set()
    for r in range(n):
        for c in range(n):
            if r + 1 < n:
                out.add(edge((r, c), (r + 1, c)))
            if c + 1 < n:
                out.add(edge((r, c), (r, c + 1)))
    return out


@dataclass(frozen=True)
class MazeLayout:
    kind: str
    walls: frozenset
    width: int = SIZE
    height: int = SIZE

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def center(self) -> Cell:
        return (self.height // 2, self.width // 2)

    def blocked(self, a: Cell, b: Cell) -> bool:
        return edge(a, b) in self.walls

    def cells(self) -> list[Cell]:
        return [(r, c) for r in range(self.height) for c in range(self.width)]


def make_layout(kind: str, n: int = SIZE) -> MazeLayout:
    if kind not in LAYOUT_KINDS:
        raise ValueError(f"unknown layout {kind!r}; expected one of {LAYOUT_KINDS}")
    if kind == "grid":
        walls: set = set()
    else:
        path = spiral_order(n)
        corridor = {edge(a, b) for a, b in zip(path[:-1], path[1:])}
        walls = all_edges(n) - corridor
        if kind == "loop":
            # opening in the inner wall at the spiral's bottom-right bend
            walls.discard(edge((n - 2, n - 2), (n - 1, n - 2)))
    layout = MazeLayout(kind, frozenset(walls), n, n)
    graph = reachable_graph(layout)
    if len(_component(graph, (0, 0))) != layout.n_cells:
        raise AssertionError(f"layout {kind} is not connected")
    return layout


def reachable_graph(layout: MazeLayout) -> dict[Cell, list[Cell]]:
    adj: dict[Cell, list[Cell]] = {cell: [] for cell in layout.cells()}
    for r, c in layout.cells():
        for dr, dc in MOVES.values():
            nb = (r + dr, c + dc)
            if 0 <= nb[0] < layout.height and 0 <= nb[1] < layout.width and not layout.blocked((r, c), nb):
                adj[(r, c)].append(nb)
    return adj


def _component(graph, start) -> set:
    seen = {start}
    todo = [start]
    while todo:
        for nb in graph[todo.pop()]:
            if nb not in seen:
                seen.add(nb)
                todo.append(nb)
    return seen


def shortest_path_lengths(layout: MazeLayout, source: Cell) -> dict[Cell, int]:
    graph = reachable_graph(layout)
    dist = {tuple(source): 0}
    q = deque([tuple(source)])
    while q:
        cur = q.popleft()
        for nb in graph[cur]:
            if nb not in dist:
                dist[nb] = dist[cur] + 1
                q.append(nb)
    return dist


def layout_to_text(layout: MazeLayout) -> str:
    lines = [f"# kind: {layout.kind}", f"# size: {layout.height}x{layout.width}"]
    lines.append("+" + "--+" * layout.width)
    for r in range(layout.height):
        row = "|"
        for c in range(layout.width):
            right = c == layout.width - 1 or layout.blocked((r, c), (r, c + 1))
            row += "  " + ("|" if right else " ")
        lines.append(row)
        below = "+"
        for c in range(layout.width):
            wall = r == layout.height - 1 or layout.blocked((r, c), (r + 1, c))
            below += ("--" if wall else "  ") + "+"
        lines.append(below)
    lines.append("walls:")
    for w in sorted(tuple(sorted(e)) for e in layout.walls):
        (r1, c1), (r2, c2) = w
        lines.append(f"{r1},{c1} {r2},{c2}")
    return "\n".join(lines) + "\n"


def layout_from_text(text: str) -> MazeLayout:
    kind = None
    walls = set()
    size = SIZE
    in_walls = False
    for line in text.splitlines():
        if line.startswith("# kind:"):
            kind = line.split(":", 1)[1].strip()
        elif line.startswith("# size:"):
            size = int(line.split(":", 1)[1].strip().split("x")[0])
        elif line.strip() == "walls:":
            in_walls = True
        elif in_walls and line.strip():
            a, b = line.split()
            walls.add(edge(tuple(map(int, a.split(","))), tuple(map(int, b.split(",")))))
    return MazeLayout(kind, frozenset(walls), size, size)


GOLDEN_DIR = Path(__file__).parent / "layouts"


def golden_layout(kind: str) -> MazeLayout:
    return layout_from_text((GOLDEN_DIR / f"{kind}.txt").read_text())


@dataclass(frozen=True)
class MazeState:
    agent: Cell
    goal: Cell | None
    steps: int
    noise_seed: int
    done: bool = False
    truncated: bool = False


@dataclass(frozen=True)
class EnvSpec:
    layout: MazeLayout
    render_mode: str = "onehot"
    noise: str = "off"
    horizon: int = 200
    pad_exogenous: bool = False

    def __post_init__(self):
        if self.render_mode not in RENDER_MODES:
            raise ValueError(f"unknown render mode {self.render_mode!r}")
        if self.noise not in NOISE_MODES:
            raise ValueError(f"unknown noise mode {self.noise!r}")

    @property
    def clean_dim(self) -> int:
        if self.render_mode == "onehot":
            return self.layout.n_cells
        return 3 * self.layout.height * CELL_PX * self.layout.width * CELL_PX

    @property
    def obs_dim(self) -> int:
        return self.clean_dim + (TILE * TILE if self.has_exogenous else 0)

    @property
    def has_exogenous(self) -> bool:
        return self.noise != "off" or self.pad_exogenous


def reset(spec: EnvSpec, goal, rng: np.random.Generator) -> tuple[MazeState, np.ndarray]:
    """Start an episode.

    ``goal`` is ``None`` (reward-free), ``"center"``, a cell, or a sequence of cells to
    sample from uniformly.
    """
    layout = spec.layout
    if goal == "center":
        goal_cell = layout.center
    elif goal is None:
        goal_cell = None
    elif isinstance(goal, tuple) and len(goal) == 2 and isinstance(goal[0], (int, np.integer)):
        goal_cell = (int(goal[0]), int(goal[1]))
    else:
        options = [tuple(g) for g in goal]
        goal_cell = options[int(rng.integers(len(options)))]
    free = [cell for cell in layout.cells() if cell != goal_cell]
    start = free[int(rng.integers(len(free)))]
    noise_seed = int(rng.integers(2**31 - 1))
    state = MazeState(start, goal_cell, 0, noise_seed)
    return state, render(state, spec)


def step(spec: EnvSpec, state: MazeState, action: int) -> tuple[MazeState, np.ndarray, float, bool, bool]:
    """Returns (next state, observation, reward, terminated, truncated)."""
    if state.done or state.truncated:
        raise ContractError("step called on a finished episode")
    if action not in MOVES:
        raise ValueError(f"invalid action {action}")
    layout = spec.layout
    dr, dc = MOVES[int(action)]
    r, c = state.agent
    nxt = (r + dr, c + dc)
    if not (0 <= nxt[0] < layout.height and 0 <= nxt[1] < layout.width) or layout.blocked((r, c), nxt):
        nxt = (r, c)
    steps = state.steps + 1
    reached = state.goal is not None and nxt == state.goal
    reward = 0.0 if reached else -1.0
    truncated = not reached and steps >= spec.horizon
    new = replace(state, agent=nxt, steps=steps, done=reached, truncated=truncated)
    return new, render(new, spec), reward, reached, truncated


def exogenous_block(spec: EnvSpec, state: MazeState) -> np.ndarray:
    if spec.noise == "image":
        rng = np.random.default_rng(state.noise_seed)
    else:
        rng = np.random.default_rng([state.noise_seed, state.steps])
    return rng.random(TILE * TILE)


FLOOR = (0.85, 0.85, 0.85)
WALL = (0.0, 0.0, 1.0)
AGENT = (1.0, 0.0, 0.0)
GOAL = (0.0, 0.8, 0.0)


def render_clean(state: MazeState, spec: EnvSpec) -> np.ndarray:
    layout = spec.layout
    if spec.render_mode == "onehot":
        out = np.zeros(layout.n_cells, dtype=np.float32)
        out[state.agent[0] * layout.width + state.agent[1]] = 1.0
        return out
    h, w = layout.height * CELL_PX, layout.width * CELL_PX
    img = np.empty((3, h, w), dtype=np.float32)
    img[:] = np.asarray(FLOOR, dtype=np.float32)[:, None, None]
    for e in layout.walls:
        (r1, c1), (r2, c2) = sorted(e)
        if r1 == r2:  # vertical wall between horizontally adjacent cells
            x = c2 * CELL_PX
            img[:, r1 * CELL_PX:(r1 + 1) * CELL_PX, x - 1:x + 1] = np.asarray(WALL)[:, None, None]
        else:
            y = r2 * CELL_PX
            img[:, y - 1:y + 1, c1 * CELL_PX:(c1 + 1) * CELL_PX] = np.asarray(WALL)[:, None, None]
    for cell, color in ((state.goal, GOAL), (state.agent, AGENT)):
        if cell is None:
            continue
        y, x = cell[0] * CELL_PX, cell[1] * CELL_PX
        img[:, y + 2:y + CELL_PX - 2, x + 2:x + CELL_PX - 2] = np.asarray(color)[:, None, None]
    return img.reshape(-1)


def render(state: MazeState, spec: EnvSpec) -> np.ndarray:
    clean = render_clean(state, spec)
    if spec.noise == "off":
        if spec.pad_exogenous:
            return np.concatenate([clean, np.zeros(TILE * TILE, dtype=np.float32)])
        return clean
    return np.concatenate([clean, exogenous_block(spec, state).astype(np.float32)])


class MazeEnv:
    """Stateful wrapper over the pure reset/step functions."""

    def __init__(self, spec: EnvSpec, goal, rng: np.random.Generator):
        self.spec = spec
        self.goal = goal
        self.rng = rng
        self.state: MazeState | None = None

    def reset(self, start: Cell | None = None) -> np.ndarray:
        self.state, obs = reset(self.spec, self.goal, self.rng)
        if start is not None:
            self.state = replace(self.state, agent=tuple(start))
            obs = render(self.state, self.spec)
        return obs

    def step(self, action: int):
        self.state, obs, reward, done, truncated = step(self.spec, self.state, action)
        return obs, reward, done, truncated


TRAJECTORY_HEADER = ["episode", "step", "row", "col", "action", "reward"]


class TrajectoryLog:
    """CSV writer for visited cells; the reset cell is logged with action -1."""

    def __init__(self, path, append: bool = False):
        new = not append or not Path(path).exists()
        self.fh = open(path, "a" if append else "w", newline="")
        self.writer = csv.writer(self.fh)
        if new:
            self.writer.writerow(TRAJECTORY_HEADER)

    def write(self, episode: int, step_idx: int, cell: Cell, action: int, reward: float) -> None:
        self.writer.writerow([episode, step_idx, cell[0], cell[1], action, reward])

    def close(self) -> None:
        self.fh.close()
