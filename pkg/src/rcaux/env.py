"""Deterministic grid environments and the exact BFS reachability oracle."""
from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

UP, DOWN, LEFT, RIGHT, STAY = range(5)
N_ACTIONS = 5
ACTION_NAMES = ("up", "down", "left", "right", "stay")
MOVES = ((-1, 0), (1, 0), (0, -1), (0, 1), (0, 0))

# D* value for pairs with no connecting path.
UNREACHABLE = -1

Cell = tuple[int, int]


@dataclass(frozen=True, eq=False)
class GridSpec:
    width: int
    height: int
    blocked: frozenset[Cell] = frozenset()
    doors: frozenset[Cell] = frozenset()
    name: str = "open"
    wall_mask: bool = False

    def __post_init__(self):
        object.__setattr__(self, "blocked", frozenset(map(tuple, self.blocked)))
        object.__setattr__(self, "doors", frozenset(map(tuple, self.doors)))
        if self.blocked & self.doors:
            raise ValueError("door cells must not be blocked")
        for r, c in self.blocked | self.doors:
            if not (0 <= r < self.height and 0 <= c < self.width):
                raise ValueError(f"cell {(r, c)} off grid")

    def __eq__(self, other):
        if not isinstance(other, GridSpec):
            return NotImplemented
        return self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def _key(self):
        return (self.width, self.height, self.blocked, self.doors, self.name, self.wall_mask)

    def in_bounds(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def is_free(self, cell: Cell) -> bool:
        return self.in_bounds(cell) and cell not in self.blocked

    @cached_property
    def free_cells(self) -> tuple[Cell, ...]:
        return tuple((r, c) for r in range(self.height) for c in range(self.width)
                     if (r, c) not in self.blocked)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    @property
    def obs_dim(self) -> int:
        return self.n_cells * (2 if self.wall_mask else 1)

    def index(self, cell: Cell) -> int:
        return cell[0] * self.width + cell[1]

    def cell(self, index: int) -> Cell:
        return divmod(int(index), self.width)

    @cached_property
    def _oracle(self) -> "_DistanceOracle":
        return _DistanceOracle(self)


def open_grid(size: int = 5) -> GridSpec:
    return GridSpec(size, size, name="open")


def tworoom(size: int = 9, door_row: int = 4) -> GridSpec:
    """Vertical wall down the middle column with a single door."""
    col = size // 2
    wall = {(r, col) for r in range(size)}
    door = {(door_row, col)}
    return GridSpec(size, size, frozenset(wall - door), frozenset(door), name="tworoom")


def wall(size: int = 9, door_col: int = 7) -> GridSpec:
    """Horizontal wall across the middle row with one door pushed to the side.

    The offset door makes cells directly across the wall look close while the
    only path detours through the door.
    """
    row = size // 2
    cells = {(row, c) for c in range(size)}
    door = {(row, door_col)}
    return GridSpec(size, size, frozenset(cells - door), frozenset(door), name="wall")


ENVS = {"tworoom": tworoom, "wall": wall, "open": open_grid}


def make_env(name: str) -> GridSpec:
    try:
        return ENVS[name]()
    except KeyError:
        raise ValueError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


def _check(spec: GridSpec, s: Cell) -> Cell:
    s = (int(s[0]), int(s[1]))
    if not spec.is_free(s):
        raise ValueError("state off grid")
    return s


def step(spec: GridSpec, s: Cell, a: int) -> Cell:
    """Apply action ``a``; moves into walls or off the grid leave ``s`` unchanged."""
    s = _check(spec, s)
    if not 0 <= a < N_ACTIONS:
        raise ValueError(f"invalid action {a}")
    dr, dc = MOVES[a]
    nxt = (s[0] + dr, s[1] + dc)
    return nxt if spec.is_free(nxt) else s


def observe(spec: GridSpec, s: Cell) -> np.ndarray:
    s = _check(spec, s)
    obs = np.zeros(spec.obs_dim, dtype=np.float32)
    obs[spec.index(s)] = 1.0
    if spec.wall_mask:
        for b in spec.blocked:
            obs[spec.n_cells + spec.index(b)] = 1.0
    return obs


class _DistanceOracle:
    """All-pairs BFS distances, filled lazily one source row at a time."""

    def __init__(self, spec: GridSpec):
        self.spec = spec
        self._rows: dict[Cell, dict[Cell, int]] = {}
        self._lock = threading.Lock()

    def row(self, s: Cell) -> dict[Cell, int]:
        row = self._rows.get(s)
        if row is None:
            row = self._bfs(s)
            with self._lock:
                self._rows.setdefault(s, row)
        return row

    def _bfs(self, s: Cell) -> dict[Cell, int]:
        dist = {s: 0}
        queue = deque([s])
        while queue:
            u = queue.popleft()
            for a in range(N_ACTIONS - 1):
                v = step(self.spec, u, a)
                if v not in dist:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist


def shortest_hitting_time(spec: GridSpec, s: Cell, g: Cell) -> int:
    """D*(s, g): fewest steps from s to g, or ``UNREACHABLE``."""
    s, g = _check(spec, s), _check(spec, g)
    return spec._oracle.row(s).get(g, UNREACHABLE)


def distance_matrix(spec: GridSpec) -> np.ndarray:
    """D* over free cells in ``spec.free_cells`` order; -1 marks unreachable."""
    cells = spec.free_cells
    out = np.full((len(cells), len(cells)), UNREACHABLE, dtype=np.int64)
    pos = {c: i for i, c in enumerate(cells)}
    for i, s in enumerate(cells):
        for g, d in spec._oracle.row(s).items():
            out[i, pos[g]] = d
    return out


def oracle_reachable(spec: GridSpec, s: Cell, g: Cell, h: int) -> bool:
    if h < 0:
        raise ValueError("budget must be non-negative")
    d = shortest_hitting_time(spec, s, g)
    return d != UNREACHABLE and d <= h


def sample_episode_spec(spec: GridSpec, rng_seed: int) -> tuple[Cell, Cell]:
    """Draw a (start, goal) pair of distinct free cells with goal reachable from start."""
    cells = spec.free_cells
    if len(cells) < 2:
        raise ValueError("need at least two free cells")
    rng = np.random.default_rng(rng_seed)
    while True:
        i, j = rng.choice(len(cells), size=2, replace=False)
        start, goal = cells[i], cells[j]
        if shortest_hitting_time(spec, start, goal) != UNREACHABLE:
            return start, goal


def spec_to_text(spec: GridSpec) -> str:
    def cells(cs):
        return " ".join(f"{r},{c}" for r, c in sorted(cs))

    return (
        f"name = {spec.name}\n"
        f"width = {spec.width}\n"
        f"height = {spec.height}\n"
        f"blocked = {cells(spec.blocked)}\n"
        f"doors = {cells(spec.doors)}\n"
        f"wall_mask = {int(spec.wall_mask)}\n"
    )


def spec_from_text(text: str) -> GridSpec:
    fields = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()

    def cells(raw):
        out = set()
        for tok in raw.split():
            r, c = tok.split(",")
            out.add((int(r), int(c)))
        return frozenset(out)

    try:
        return GridSpec(
            width=int(fields["width"]),
            height=int(fields["height"]),
            blocked=cells(fields.get("blocked", "")),
            doors=cells(fields.get("doors", "")),
            name=fields.get("name", "custom"),
            wall_mask=bool(int(fields.get("wall_mask", "0"))),
        )
    except KeyError as exc:
        raise ValueError(f"grid spec missing key {exc.args[0]}") from None
