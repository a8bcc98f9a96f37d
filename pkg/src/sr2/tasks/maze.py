"""Maze generation, shortest paths, path validation and token encoding.

A maze is a ``height x width`` boolean wall grid. Generated mazes carve a
spanning tree over the odd-coordinate cells with randomized depth-first search,
so every open cell is reachable and the path between two cells is unique.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np

WALL, OPEN, START, GOAL = 0, 1, 2, 3
OFF_PATH, ON_PATH = 0, 1

Cell = tuple[int, int]


@dataclass
class MazeInstance:
    walls: np.ndarray
    start: Cell
    goal: Cell
    path: list[Cell] = field(default_factory=list)
    instance_id: int = 0

    def __post_init__(self):
        self.walls = np.asarray(self.walls, dtype=bool)
        self.start = tuple(int(v) for v in self.start)
        self.goal = tuple(int(v) for v in self.goal)
        if self.start == self.goal:
            raise ValueError("start and goal must differ")
        for c in (self.start, self.goal):
            if not self.in_bounds(c) or self.walls[c]:
                raise ValueError(f"endpoint {c} is outside the maze or inside a wall")

    @property
    def height(self) -> int:
        return self.walls.shape[0]

    @property
    def width(self) -> int:
        return self.walls.shape[1]

    def in_bounds(self, c: Cell) -> bool:
        return 0 <= c[0] < self.walls.shape[0] and 0 <= c[1] < self.walls.shape[1]

    def neighbours(self, c: Cell):
        for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
            nb = (c[0] + dr, c[1] + dc)
            if self.in_bounds(nb) and not self.walls[nb]:
                yield nb


def bfs_distances(inst: MazeInstance, source: Cell) -> np.ndarray:
    """Step distance from ``source`` to every open cell (-1 where unreachable)."""
    dist = np.full(inst.walls.shape, -1, dtype=np.int64)
    dist[source] = 0
    queue = deque([source])
    while queue:
        c = queue.popleft()
        for nb in inst.neighbours(c):
            if dist[nb] < 0:
                dist[nb] = dist[c] + 1
                queue.append(nb)
    return dist


def bfs_path(inst: MazeInstance) -> list[Cell] | None:
    """A shortest start-to-goal path as a cell list, or None if disconnected."""
    dist = bfs_distances(inst, inst.goal)
    if dist[inst.start] < 0:
        return None
    path = [inst.start]
    while path[-1] != inst.goal:
        c = path[-1]
        path.append(min(inst.neighbours(c), key=lambda nb: (dist[nb] if dist[nb] >= 0 else 1 << 62, nb)))
    return path


def generate_maze(width: int, height: int, seed) -> MazeInstance:
    """Perfect maze with random start/goal and its BFS solution path."""
    ch, cw = (height - 1) // 2, (width - 1) // 2
    if ch < 1 or cw < 1 or ch * cw < 2:
        raise ValueError("maze needs width and height >= 3 and at least one of them >= 5")
    rng = np.random.default_rng(seed)
    walls = np.ones((height, width), dtype=bool)
    visited = np.zeros((ch, cw), dtype=bool)
    first = (int(rng.integers(ch)), int(rng.integers(cw)))
    visited[first] = True
    walls[2 * first[0] + 1, 2 * first[1] + 1] = False
    stack = [first]
    while stack:
        r, c = stack[-1]
        options = [(r + dr, c + dc, dr, dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))
                   if 0 <= r + dr < ch and 0 <= c + dc < cw and not visited[r + dr, c + dc]]
        if not options:
            stack.pop()
            continue
        nr, nc, dr, dc = options[int(rng.integers(len(options)))]
        walls[2 * r + 1 + dr, 2 * c + 1 + dc] = False
        walls[2 * nr + 1, 2 * nc + 1] = False
        visited[nr, nc] = True
        stack.append((nr, nc))
    open_cells = np.argwhere(~walls)
    i, j = rng.choice(len(open_cells), size=2, replace=False)
    inst = MazeInstance(walls, tuple(open_cells[i]), tuple(open_cells[j]))
    inst.path = bfs_path(inst)
    return inst


def path_length(inst: MazeInstance) -> int:
    """Number of moves on the shortest path."""
    if not inst.path:
        inst.path = bfs_path(inst) or []
    return len(inst.path) - 1


def filter_hardest(instances: list[MazeInstance], keep_fraction: float) -> list[MazeInstance]:
    """Keep the instances with the longest shortest paths, hardest first.

    Ties are broken by instance id.
    """
    if not 0 < keep_fraction <= 1:
        raise ValueError("keep_fraction must be in (0, 1]")
    ranked = sorted(instances, key=lambda m: (-path_length(m), m.instance_id))
    keep = max(1, int(round(keep_fraction * len(instances)))) if instances else 0
    return ranked[:keep]


@dataclass
class PathCheck:
    valid: bool
    optimal: bool

    def __bool__(self) -> bool:
        return self.valid


def validate_maze_path(inst: MazeInstance, predicted) -> PathCheck:
    """Check that on-path cells form a simple, wall-free start-to-goal path.

    The marked cells must include both endpoints, avoid walls, and induce a
    simple path: endpoints have one marked neighbour, every other marked cell
    exactly two, and all are connected. ``optimal`` additionally requires the
    BFS shortest length.
    """
    on = np.asarray(predicted).astype(bool)
    if on.shape != inst.walls.shape:
        raise ValueError(f"prediction shape {on.shape} does not match maze {inst.walls.shape}")
    bad = PathCheck(False, False)
    if not (on[inst.start] and on[inst.goal]) or (on & inst.walls).any():
        return bad
    cells = [tuple(int(v) for v in c) for c in np.argwhere(on)]
    for c in cells:
        deg = sum(1 for nb in inst.neighbours(c) if on[nb])
        if deg != (1 if c in (inst.start, inst.goal) else 2):
            return bad
    seen = {inst.start}
    queue = deque([inst.start])
    while queue:
        c = queue.popleft()
        for nb in inst.neighbours(c):
            if on[nb] and nb not in seen:
                seen.add(nb)
                queue.append(nb)
    if len(seen) != len(cells):
        return bad
    shortest = bfs_distances(inst, inst.start)[inst.goal]
    return PathCheck(True, len(cells) - 1 == shortest)


def encode_maze(inst: MazeInstance) -> tuple[np.ndarray, np.ndarray]:
    """Row-major input tokens {wall, open, start, goal} and on-path targets."""
    x = np.where(inst.walls, WALL, OPEN).astype(np.int64)
    x[inst.start] = START
    x[inst.goal] = GOAL
    y = np.zeros(inst.walls.shape, dtype=np.int64)
    for c in inst.path or bfs_path(inst):
        y[c] = ON_PATH
    return x.reshape(-1), y.reshape(-1)


def decode_maze(inputs, targets, height: int, width: int, instance_id: int = 0) -> MazeInstance:
    x = np.asarray(inputs).reshape(height, width)
    y = np.asarray(targets).reshape(height, width)
    start = tuple(np.argwhere(x == START)[0])
    goal = tuple(np.argwhere(x == GOAL)[0])
    inst = MazeInstance(x == WALL, start, goal, instance_id=instance_id)
    marked = y == ON_PATH
    path = [inst.start]
    prev = None
    while path[-1] != inst.goal:
        nxt = [nb for nb in inst.neighbours(path[-1]) if marked[nb] and nb != prev]
        if len(nxt) != 1:
            raise ValueError("target tokens do not trace a simple path")
        prev = path[-1]
        path.append(nxt[0])
    inst.path = path
    return inst
