"""Continuous 2D maze navigation: a point mass with velocity on a wall grid.

The agent lives in the open interior of an ASCII maze. Dynamics are
semi-implicit Euler with per-axis collision sliding; reward is +1 inside the
target radius minus a small quadratic action cost. Mazes are value objects:
any number of rollouts may share one spec.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from importlib import resources

import numpy as np

WALL, FREE, START, TARGET = "#", ".", "S", "T"

ACTION_COST = 0.01
RESET_JITTER = 0.1  # fraction of a cell, per axis


class MazeError(ValueError):
    """Maze grid or configuration violates the layout invariants."""


class EpisodeDone(RuntimeError):
    """step() was called on a state whose episode already ended."""


@dataclass(frozen=True)
class MazeSpec:
    """Wall layout plus dynamics parameters. Immutable; shared freely."""

    grid: tuple[str, ...]
    name: str = ""
    cell_size: float = 1.0
    dt: float = 0.1
    max_speed: float = 3.0
    t_max: int = 300
    target_radius: float = 0.5

    def __post_init__(self):
        rows = self.grid
        if not rows:
            raise MazeError("empty grid")
        width = len(rows[0])
        if any(len(r) != width for r in rows):
            raise MazeError("grid is not rectangular")
        flat = "".join(rows)
        if flat.count(START) != 1 or flat.count(TARGET) != 1:
            raise MazeError("grid must contain exactly one 'S' and one 'T'")
        if set(flat) - set("#.ST"):
            raise MazeError(f"unknown grid characters: {set(flat) - set('#.ST')}")
        boundary = rows[0] + rows[-1] + "".join(r[0] + r[-1] for r in rows)
        if set(boundary) != {WALL}:
            raise MazeError("outer boundary must be all walls")

    @property
    def n_rows(self) -> int:
        return len(self.grid)

    @property
    def n_cols(self) -> int:
        return len(self.grid[0])

    @property
    def width(self) -> float:
        return self.n_cols * self.cell_size

    @property
    def height(self) -> float:
        return self.n_rows * self.cell_size

    def _find(self, ch: str) -> tuple[int, int]:
        for r, row in enumerate(self.grid):
            c = row.find(ch)
            if c >= 0:
                return r, c
        raise MazeError(f"missing {ch!r}")

    @property
    def start_cell(self) -> tuple[int, int]:
        return self._find(START)

    @property
    def target_cell(self) -> tuple[int, int]:
        return self._find(TARGET)

    def cell_center(self, cell: tuple[int, int]) -> np.ndarray:
        r, c = cell
        return np.array([(c + 0.5) * self.cell_size, (r + 0.5) * self.cell_size])

    @property
    def target_pos(self) -> np.ndarray:
        return self.cell_center(self.target_cell)

    def is_wall_cell(self, r: int, c: int) -> bool:
        if r < 0 or r >= self.n_rows or c < 0 or c >= self.n_cols:
            return True
        return self.grid[r][c] == WALL

    def cell_of(self, x: float, y: float) -> tuple[int, int]:
        return int(y // self.cell_size), int(x // self.cell_size)

    def is_free(self, x: float, y: float) -> bool:
        """Point-in-free-space test (S and T cells count as free)."""
        if not (0.0 <= x < self.width and 0.0 <= y < self.height):
            return False
        r, c = self.cell_of(x, y)
        return self.grid[r][c] != WALL

    def free_cells(self) -> list[tuple[int, int]]:
        return [
            (r, c)
            for r in range(self.n_rows)
            for c in range(self.n_cols)
            if self.grid[r][c] != WALL
        ]


@dataclass
class EnvState:
    pos: np.ndarray  # (2,) length units
    vel: np.ndarray  # (2,) units/s
    step: int = 0

    def vec(self) -> np.ndarray:
        """Flat [px, py, vx, vy] view used as network input and goal encoding."""
        return np.concatenate([self.pos, self.vel])


def state_from_vec(v: np.ndarray, step: int = 0) -> EnvState:
    v = np.asarray(v, dtype=np.float64)
    return EnvState(pos=v[:2].copy(), vel=v[2:4].copy(), step=step)


def reset(spec: MazeSpec, rng: np.random.Generator | int | None = None, jitter: bool = True) -> EnvState:
    """Start at the S-cell center with +-0.1 cell uniform jitter, zero velocity."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    pos = spec.cell_center(spec.start_cell)
    if jitter:
        pos = pos + rng.uniform(-RESET_JITTER, RESET_JITTER, size=2) * spec.cell_size
    return EnvState(pos=pos, vel=np.zeros(2), step=0)


def _reached(spec: MazeSpec, pos: np.ndarray) -> bool:
    return float(np.linalg.norm(pos - spec.target_pos)) <= spec.target_radius


def step(spec: MazeSpec, state: EnvState, action) -> tuple[EnvState, float, bool, bool]:
    """Advance one step: returns (next state, r_env, done, wall_contact).

    Semi-implicit Euler; collisions resolved per axis (blocked axis keeps its
    old coordinate and zeroes its velocity). max_speed clamps the velocity norm.
    """
    if state.step >= spec.t_max or _reached(spec, state.pos):
        raise EpisodeDone(f"episode already ended at step {state.step}")
    a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
    vel = state.vel + a * spec.dt
    speed = float(np.linalg.norm(vel))
    if speed > spec.max_speed:
        vel = vel * (spec.max_speed / speed)
    x, y = state.pos
    vx, vy = vel
    contact = False
    nx = x + vx * spec.dt
    if spec.is_free(nx, y):
        x = nx
    else:
        vx = 0.0
        contact = True
    ny = y + vy * spec.dt
    if spec.is_free(x, ny):
        y = ny
    else:
        vy = 0.0
        contact = True
    pos = np.array([x, y])
    reached = _reached(spec, pos)
    reward = (1.0 if reached else 0.0) - ACTION_COST * float(a @ a)
    nxt = EnvState(pos=pos, vel=np.array([vx, vy]), step=state.step + 1)
    done = reached or nxt.step >= spec.t_max
    return nxt, reward, done, contact


def distance(a, b) -> float:
    """Euclidean distance between the position components; velocity is ignored."""
    pa = a.pos if isinstance(a, EnvState) else np.asarray(a, dtype=np.float64)[:2]
    pb = b.pos if isinstance(b, EnvState) else np.asarray(b, dtype=np.float64)[:2]
    return float(np.linalg.norm(pa - pb))


def distance_batch(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Row-wise positional distance for (B, >=2) state arrays."""
    return np.linalg.norm(a[:, :2] - b[:, :2], axis=1)


# ---------------------------------------------------------------------------
# built-in layouts and file loading
# ---------------------------------------------------------------------------

_BUILTIN_TMAX = {"umaze": 150, "medium": 250, "large": 400}


def load_maze_file(txt_path, config_path=None, name: str = "") -> MazeSpec:
    """Read an ASCII grid file; optional JSON config overrides dynamics fields."""
    with open(txt_path) as f:
        rows = tuple(line.rstrip("\n") for line in f if line.strip())
    spec = MazeSpec(grid=rows, name=name or str(txt_path))
    if config_path is not None:
        with open(config_path) as f:
            cfg = json.load(f)
        allowed = {"cell_size", "dt", "max_speed", "t_max", "target_radius"}
        unknown = set(cfg) - allowed
        if unknown:
            raise MazeError(f"unknown env config keys: {sorted(unknown)}")
        spec = replace(spec, **cfg)
    return spec


def load_builtin(name: str) -> MazeSpec:
    """Load one of the checked-in layouts: umaze, medium, large."""
    if name not in _BUILTIN_TMAX:
        raise MazeError(f"unknown maze {name!r}; builtins: {sorted(_BUILTIN_TMAX)}")
    ref = resources.files("hiplan.mazes").joinpath(f"{name}.txt")
    rows = tuple(line for line in ref.read_text().splitlines() if line.strip())
    return MazeSpec(grid=rows, name=name, t_max=_BUILTIN_TMAX[name])
