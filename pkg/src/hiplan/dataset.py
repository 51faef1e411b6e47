"""Offline dataset generation: scripted waypoint expert, JSONL files, scoring.

The data-collecting expert is a PD controller tracking a breadth-first cell
path from start to target. Two quality tiers: "expert" (well-tuned gains,
sigma=0.05 action noise) and "medium" (halved proportional gain, sigma=0.3).
Dataset files are JSON Lines: one metadata object, then one transition per
line, floats at 17 significant digits so a read-back is bit-exact.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, asdict

import numpy as np

from . import env
from .env import EnvState, MazeSpec

TIERS = ("medium", "expert")

EXPERT_KP = 1.5
EXPERT_KD = 0.8
EXPERT_SIGMA = 0.05
MEDIUM_SIGMA = 0.3
WAYPOINT_RADIUS = 0.3  # fraction of a cell: advance threshold

BASELINE_EPISODES = 100  # rollouts used to measure random/expert mean returns


class UnreachableError(ValueError):
    """No wall-free path exists between the requested cells."""


# ---------------------------------------------------------------------------
# scripted expert
# ---------------------------------------------------------------------------


def plan_waypoints(spec: MazeSpec, from_cell, to_cell) -> list[tuple[int, int]]:
    """Shortest 4-connected cell path by BFS; neighbor order N,E,S,W fixes ties."""
    from_cell, to_cell = tuple(from_cell), tuple(to_cell)
    for cell in (from_cell, to_cell):
        if spec.is_wall_cell(*cell):
            raise UnreachableError(f"cell {cell} is a wall")
    parent = {from_cell: None}
    queue = deque([from_cell])
    while queue:
        cell = queue.popleft()
        if cell == to_cell:
            break
        r, c = cell
        for nr, nc in ((r - 1, c), (r, c + 1), (r + 1, c), (r, c - 1)):
            if not spec.is_wall_cell(nr, nc) and (nr, nc) not in parent:
                parent[(nr, nc)] = cell
                queue.append((nr, nc))
    if to_cell not in parent:
        raise UnreachableError(f"no path from {from_cell} to {to_cell}")
    path = []
    cell = to_cell
    while cell is not None:
        path.append(cell)
        cell = parent[cell]
    return path[::-1]


def _tier_gains(tier: str) -> tuple[float, float, float]:
    if tier == "expert":
        return EXPERT_KP, EXPERT_KD, EXPERT_SIGMA
    if tier == "medium":
        return EXPERT_KP / 2.0, EXPERT_KD, MEDIUM_SIGMA
    raise ValueError(f"unknown tier {tier!r}; expected one of {TIERS}")


def advance_waypoints(state: EnvState, waypoints: list[np.ndarray], spec: MazeSpec) -> list[np.ndarray]:
    """Drop leading waypoints already within 0.3 cell (the last one stays)."""
    i = 0
    thr = WAYPOINT_RADIUS * spec.cell_size
    while i < len(waypoints) - 1 and np.linalg.norm(state.pos - waypoints[i]) < thr:
        i += 1
    return waypoints[i:]


def _straight_run_target(waypoints: list[np.ndarray]) -> np.ndarray:
    """Aim at the last collinear waypoint of the current straight corridor run."""
    target = waypoints[0]
    for nxt in waypoints[1:]:
        dx, dy = nxt - target
        if abs(dx) > 1e-9 and abs(dy) > 1e-9:
            break
        if len(waypoints) > 1 and not _same_axis(waypoints[0], target, nxt):
            break
        target = nxt
    return target


def _same_axis(a, b, c) -> bool:
    ab = b - a
    bc = c - b
    if np.allclose(ab, 0.0):
        return True
    return bool(abs(ab[0] * bc[1] - ab[1] * bc[0]) < 1e-9)


def expert_act(
    state: EnvState,
    waypoints: list[np.ndarray],
    tier: str,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """PD acceleration toward the current waypoint run; tier sets gains/noise.

    `waypoints` is the remaining list of cell-center positions (see
    advance_waypoints); noise is skipped when rng is None.
    """
    if not waypoints:
        raise ValueError("empty waypoint list")
    kp, kd, sigma = _tier_gains(tier)
    target = _straight_run_target(waypoints)
    a = kp * (target - state.pos) - kd * state.vel
    if rng is not None and sigma > 0.0:
        a = a + rng.normal(0.0, sigma, size=2)
    return np.clip(a, -1.0, 1.0)


class ScriptedExpert:
    """Stateful wrapper: plans once at reset, then tracks and advances waypoints."""

    def __init__(self, spec: MazeSpec, tier: str, rng: np.random.Generator | None = None):
        self.spec = spec
        self.tier = tier
        self.rng = rng
        self._remaining: list[np.ndarray] = []

    def reset(self) -> None:
        cells = plan_waypoints(self.spec, self.spec.start_cell, self.spec.target_cell)
        self._remaining = [self.spec.cell_center(c) for c in cells]

    def act(self, state: EnvState) -> np.ndarray:
        self._remaining = advance_waypoints(state, self._remaining, self.spec)
        return expert_act(state, self._remaining, self.tier, self.rng)


# ---------------------------------------------------------------------------
# rollout measurement
# ---------------------------------------------------------------------------


@dataclass
class RolloutStats:
    mean_return: float
    success_rate: float
    wall_contact_rate: float
    mean_steps: float


def rollout_policy(spec: MazeSpec, act_fn, episodes: int, rng: np.random.Generator) -> RolloutStats:
    """Run `episodes` rollouts of act_fn(state, rng) and aggregate the stats."""
    returns, successes, contacts, steps = [], 0, 0, []
    for _ in range(episodes):
        state = env.reset(spec, rng)
        total, hit_wall, done = 0.0, False, False
        while not done:
            action = act_fn(state, rng)
            state, r, done, contact = env.step(spec, state, action)
            total += r
            hit_wall = hit_wall or contact
        returns.append(total)
        reached = float(np.linalg.norm(state.pos - spec.target_pos)) <= spec.target_radius
        successes += int(reached)
        contacts += int(hit_wall)
        steps.append(state.step)
    n = float(episodes)
    return RolloutStats(
        mean_return=float(np.mean(returns)),
        success_rate=successes / n,
        wall_contact_rate=contacts / n,
        mean_steps=float(np.mean(steps)),
    )


def random_policy(state: EnvState, rng: np.random.Generator) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=2)


def make_expert_policy(spec: MazeSpec, tier: str):
    """act_fn adapter around ScriptedExpert; replans whenever step counter resets."""
    holder = {"expert": None}

    def act(state: EnvState, rng: np.random.Generator) -> np.ndarray:
        if state.step == 0 or holder["expert"] is None:
            holder["expert"] = ScriptedExpert(spec, tier, rng)
            holder["expert"].reset()
        return holder["expert"].act(state)

    return act


# ---------------------------------------------------------------------------
# dataset container and file format
# ---------------------------------------------------------------------------


@dataclass
class DatasetMeta:
    tier: str
    k: int
    maze: str
    seed: int
    mean_return: float
    random_return: float
    expert_return: float

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("K must be >= 1")
        if self.expert_return <= self.random_return:
            raise ValueError("expert mean return must exceed random mean return")


class Dataset:
    """Column store over transitions plus per-trajectory state sequences."""

    def __init__(self, meta: DatasetMeta, spec: MazeSpec, columns: dict):
        self.meta = meta
        self.spec = spec
        self.s = columns["s"]          # (T, 4)
        self.a = columns["a"]          # (T, 2)
        self.sp = columns["sp"]        # (T, 4)
        self.r = columns["r"]          # (T,)
        self.done = columns["done"]    # (T,) bool
        self.traj = columns["k"]       # (T,) trajectory id
        self.j = columns["j"]          # (T,) step index within trajectory
        self._index()

    def _index(self):
        T = len(self.r)
        ids = np.unique(self.traj)
        self.n_traj = len(ids)
        self.traj_start = np.zeros(self.n_traj, dtype=np.int64)
        self.traj_len = np.zeros(self.n_traj, dtype=np.int64)
        for t in range(self.n_traj):
            mask = np.flatnonzero(self.traj == ids[t])
            self.traj_start[t] = mask[0]
            self.traj_len[t] = len(mask)
        # states[state_start[t] + tau] for tau in 0..len: per-trajectory states
        self.state_start = np.zeros(self.n_traj, dtype=np.int64)
        total = 0
        for t in range(self.n_traj):
            self.state_start[t] = total
            total += self.traj_len[t] + 1
        self.states = np.zeros((total, self.s.shape[1]))
        for t in range(self.n_traj):
            b, L, sb = self.traj_start[t], self.traj_len[t], self.state_start[t]
            self.states[sb : sb + L] = self.s[b : b + L]
            self.states[sb + L] = self.sp[b + L - 1]
        # map each transition row to (trajectory slot, j)
        self.row_traj = np.searchsorted(self.traj_start, np.arange(T), side="right") - 1

    def __len__(self) -> int:
        return len(self.r)

    def goal_pairs(self, n_apart: int) -> tuple[np.ndarray, np.ndarray]:
        """All (state_i, state_{i+n}) pairs within trajectories, as two arrays."""
        prev, nxt = [], []
        for t in range(self.n_traj):
            sb, L = self.state_start[t], self.traj_len[t]
            n_states = L + 1
            if n_states <= n_apart:
                continue
            block = self.states[sb : sb + n_states]
            prev.append(block[:-n_apart])
            nxt.append(block[n_apart:])
        if not prev:
            raise ValueError(f"no trajectory has more than {n_apart} steps")
        return np.concatenate(prev), np.concatenate(nxt)


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def _transition_line(k: int, j: int, s, a, sp, r: float, done: bool) -> str:
    sv = ",".join(_fmt(v) for v in s)
    av = ",".join(_fmt(v) for v in a)
    spv = ",".join(_fmt(v) for v in sp)
    flag = "true" if done else "false"
    return (
        f'{{"k":{k},"j":{j},"s":[{sv}],"a":[{av}],"sp":[{spv}],'
        f'"r":{_fmt(r)},"done":{flag}}}'
    )


def _meta_line(meta: DatasetMeta, spec: MazeSpec) -> str:
    import json

    payload = asdict(meta)
    for key in ("mean_return", "random_return", "expert_return"):
        payload[key] = float(_fmt(payload[key]))
    payload["env"] = {
        "grid": list(spec.grid),
        "cell_size": spec.cell_size,
        "dt": spec.dt,
        "max_speed": spec.max_speed,
        "t_max": spec.t_max,
        "target_radius": spec.target_radius,
    }
    return json.dumps(payload, sort_keys=True)


def collect(
    spec: MazeSpec,
    tier: str,
    k: int,
    seed: int,
    path,
) -> tuple[Dataset, DatasetMeta]:
    """Record K complete expert episodes to `path` and return the dataset.

    The metadata line stores measured mean returns for the uniform-random
    policy, the expert-tier controller, and the collected episodes themselves.
    """
    if k < 1:
        raise ValueError("K must be >= 1")
    master = np.random.default_rng(seed)
    collect_rng = np.random.default_rng(master.integers(2**63))
    random_rng = np.random.default_rng(master.integers(2**63))
    expert_rng = np.random.default_rng(master.integers(2**63))

    rows_k, rows_j, S, A, SP, R, D = [], [], [], [], [], [], []
    ep_returns = []
    for ep in range(k):
        expert = ScriptedExpert(spec, tier, collect_rng)
        expert.reset()
        state = env.reset(spec, collect_rng)
        done, j, total = False, 0, 0.0
        while not done:
            action = expert.act(state)
            nxt, r, done, _ = env.step(spec, state, action)
            rows_k.append(ep)
            rows_j.append(j)
            S.append(state.vec())
            A.append(action)
            SP.append(nxt.vec())
            R.append(r)
            D.append(done)
            state, j, total = nxt, j + 1, total + r
        ep_returns.append(total)

    random_stats = rollout_policy(spec, random_policy, BASELINE_EPISODES, random_rng)
    expert_stats = rollout_policy(
        spec, make_expert_policy(spec, "expert"), BASELINE_EPISODES, expert_rng
    )
    meta = DatasetMeta(
        tier=tier,
        k=k,
        maze=spec.name,
        seed=seed,
        mean_return=float(np.mean(ep_returns)),
        random_return=random_stats.mean_return,
        expert_return=expert_stats.mean_return,
    )
    with open(path, "w") as f:
        f.write(_meta_line(meta, spec) + "\n")
        for i in range(len(R)):
            f.write(
                _transition_line(rows_k[i], rows_j[i], S[i], A[i], SP[i], R[i], D[i])
                + "\n"
            )
    columns = {
        "s": np.array(S),
        "a": np.array(A),
        "sp": np.array(SP),
        "r": np.array(R),
        "done": np.array(D, dtype=bool),
        "k": np.array(rows_k, dtype=np.int64),
        "j": np.array(rows_j, dtype=np.int64),
    }
    return Dataset(meta, spec, columns), meta


def load_dataset(path) -> Dataset:
    """Read a JSONL dataset file written by collect()."""
    import json

    with open(path) as f:
        header = json.loads(f.readline())
        envinfo = header.pop("env")
        meta = DatasetMeta(**header)
        spec = MazeSpec(
            grid=tuple(envinfo["grid"]),
            name=meta.maze,
            cell_size=envinfo["cell_size"],
            dt=envinfo["dt"],
            max_speed=envinfo["max_speed"],
            t_max=envinfo["t_max"],
            target_radius=envinfo["target_radius"],
        )
        S, A, SP, R, D, K, J = [], [], [], [], [], [], []
        for line in f:
            row = json.loads(line)
            S.append(row["s"])
            A.append(row["a"])
            SP.append(row["sp"])
            R.append(row["r"])
            D.append(row["done"])
            K.append(row["k"])
            J.append(row["j"])
    columns = {
        "s": np.array(S),
        "a": np.array(A),
        "sp": np.array(SP),
        "r": np.array(R),
        "done": np.array(D, dtype=bool),
        "k": np.array(K, dtype=np.int64),
        "j": np.array(J, dtype=np.int64),
    }
    return Dataset(meta, spec, columns)


def normalized_score(score: float, random_score: float, expert_score: float) -> float:
    """100 * (score - random) / (expert - random)."""
    denom = expert_score - random_score
    if denom == 0.0:
        raise ZeroDivisionError("expert and random scores are equal")
    return 100.0 * (score - random_score) / denom
