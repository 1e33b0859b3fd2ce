"""Deterministic 2-D pick-and-place world with a scripted expert.

The agent (a 3x3 square, intensity 255) moves in the unit square, can grasp
the object (160) when within ``GRASP_RADIUS`` and must drop it on the goal
(80).  Dynamics are a pure function of ``(state, action)``.

Trajectory files are little-endian::

    "JVTR" | version u32 | T u32 | H u32 | W u32 | action_dim u32 | task_id u32
    | T*H*W u8 pixels | (T-1)*action_dim f32 actions
"""

from __future__ import annotations

import os
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

GRASP_RADIUS = 0.06
GOAL_RADIUS = 0.05
MAX_DELTA = 0.1
GAIN = 0.5
FRAME_SIZE = 32
ACTION_DIM = 3
TRAJ_LEN = 40
N_TASKS = 4

AGENT_VALUE, OBJECT_VALUE, GOAL_VALUE = 255, 160, 80
MAGIC = b"JVTR"
VERSION = 1
_HEADER = struct.Struct("<4sIIIIII")


@dataclass(frozen=True)
class WorldState:
    agent_xy: tuple[float, float]
    object_xy: tuple[float, float]
    goal_xy: tuple[float, float]
    gripper: int = 0
    held: bool = False

    @property
    def task_id(self) -> int:
        return task_of(self.goal_xy)

    def solved(self) -> bool:
        return not self.held and _dist(self.object_xy, self.goal_xy) <= GOAL_RADIUS


def task_of(goal_xy) -> int:
    """Goal quadrant; stands in for the language instruction."""
    return int(goal_xy[0] > 0.5) + 2 * int(goal_xy[1] > 0.5)


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _clip_delta(v: float) -> float:
    return min(MAX_DELTA, max(-MAX_DELTA, v))


def step(s: WorldState, action) -> WorldState:
    """Advance one step: grasp/release on the pre-move state, then move."""
    dx, dy, grip = (float(v) for v in action)
    dx = _clip_delta(dx) if np.isfinite(dx) else 0.0
    dy = _clip_delta(dy) if np.isfinite(dy) else 0.0
    closed = 1 if (np.isfinite(grip) and grip >= 0.5) else 0
    held = s.held
    if closed and not held and _dist(s.agent_xy, s.object_xy) <= GRASP_RADIUS:
        held = True
    elif not closed:
        held = False
    ax, ay = s.agent_xy
    nx_, ny_ = _clip01(ax + dx), _clip01(ay + dy)
    obj = s.object_xy
    if held:
        obj = (_clip01(obj[0] + (nx_ - ax)), _clip01(obj[1] + (ny_ - ay)))
    return replace(s, agent_xy=(nx_, ny_), object_xy=obj, gripper=closed, held=held)


def expert_policy(s: WorldState) -> np.ndarray:
    """Proportional controller: approach, grasp, carry, release."""
    if s.solved():
        return np.zeros(ACTION_DIM)
    if not s.held:
        ex, ey = s.object_xy[0] - s.agent_xy[0], s.object_xy[1] - s.agent_xy[1]
        grip = 1.0 if _dist(s.agent_xy, s.object_xy) <= GRASP_RADIUS else 0.0
        return np.array([_clip_delta(GAIN * ex), _clip_delta(GAIN * ey), grip])
    if _dist(s.object_xy, s.goal_xy) <= GOAL_RADIUS:
        return np.array([0.0, 0.0, 0.0])
    ex, ey = s.goal_xy[0] - s.object_xy[0], s.goal_xy[1] - s.object_xy[1]
    return np.array([_clip_delta(GAIN * ex), _clip_delta(GAIN * ey), 1.0])


def _pixel(v: float, size: int) -> int:
    return int(round(v * (size - 1)))


def render(s: WorldState, size: int = FRAME_SIZE) -> np.ndarray:
    frame = np.zeros((size, size), dtype=np.uint8)
    for xy, value in ((s.goal_xy, GOAL_VALUE), (s.object_xy, OBJECT_VALUE), (s.agent_xy, AGENT_VALUE)):
        c, r = _pixel(xy[0], size), _pixel(xy[1], size)
        patch = frame[max(r - 1, 0): r + 2, max(c - 1, 0): c + 2]
        np.maximum(patch, value, out=patch)
    return frame


def random_state(rng: np.random.Generator) -> WorldState:
    """Initial states keep the object well away from the goal and the agent."""
    while True:
        agent, obj, goal = (tuple(float(v) for v in rng.uniform(0.1, 0.9, size=2)) for _ in range(3))
        if _dist(obj, goal) > 0.3 and _dist(agent, obj) > 0.3:
            return WorldState(agent_xy=agent, object_xy=obj, goal_xy=goal)


@dataclass
class Trajectory:
    frames: np.ndarray  # (T, H, W) uint8
    actions: np.ndarray  # (T-1, 3) float32
    task_id: int

    def __len__(self) -> int:
        return len(self.frames)

    def active_steps(self) -> int:
        """Index of the last step before the trailing run of no-op actions ends the
        episode; that final no-op is the release, so it counts as active."""
        moving = np.flatnonzero(np.any(self.actions != 0, axis=1))
        return 0 if len(moving) == 0 else int(moving[-1]) + 1


def rollout_expert(s0: WorldState, length: int = TRAJ_LEN, size: int = FRAME_SIZE) -> Trajectory:
    """Record ``length`` frames; actions are rounded to float32 before stepping
    so that replaying the stored actions is exact."""
    frames = [render(s0, size)]
    actions = []
    s = s0
    for _ in range(length - 1):
        a = expert_policy(s).astype(np.float32)
        actions.append(a)
        s = step(s, a.astype(np.float64))
        frames.append(render(s, size))
    return Trajectory(np.stack(frames), np.stack(actions), s0.task_id)


def replay(s0: WorldState, actions: np.ndarray, size: int = FRAME_SIZE) -> np.ndarray:
    s = s0
    out = [render(s, size)]
    for a in actions:
        s = step(s, np.asarray(a, dtype=np.float64))
        out.append(render(s, size))
    return np.stack(out)


# ---------------------------------------------------------------------------
# files


def encode_trajectory(traj: Trajectory) -> bytes:
    t, h, w = traj.frames.shape
    header = _HEADER.pack(MAGIC, VERSION, t, h, w, ACTION_DIM, traj.task_id)
    return header + traj.frames.astype(np.uint8).tobytes() + traj.actions.astype("<f4").tobytes()


def decode_trajectory(buf: bytes, name: str = "<bytes>") -> Trajectory:
    if len(buf) < _HEADER.size:
        raise ValueError(f"{name}: truncated trajectory header")
    magic, version, t, h, w, adim, task = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise ValueError(f"{name}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise ValueError(f"{name}: unsupported trajectory version {version}")
    n_pix, n_act = t * h * w, (t - 1) * adim
    if len(buf) != _HEADER.size + n_pix + 4 * n_act:
        raise ValueError(f"{name}: size {len(buf)} does not match header (T={t}, H={h}, W={w})")
    off = _HEADER.size
    frames = np.frombuffer(buf, dtype=np.uint8, count=n_pix, offset=off).reshape(t, h, w).copy()
    actions = np.frombuffer(buf, dtype="<f4", count=n_act, offset=off + n_pix).reshape(t - 1, adim).astype(np.float32)
    return Trajectory(frames, actions, int(task))


def write_trajectory(traj: Trajectory, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_trajectory(traj))


def read_trajectory(path: str | os.PathLike) -> Trajectory:
    return decode_trajectory(Path(path).read_bytes(), str(path))


def initial_state(seed: int, index: int) -> WorldState:
    return random_state(np.random.default_rng([seed, index]))


def _make_one(args):
    seed, index, length = args
    return encode_trajectory(rollout_expert(initial_state(seed, index), length))


def _workers() -> int:
    env = os.environ.get("JVPM_THREADS")
    return max(1, int(env)) if env else (os.cpu_count() or 1)


def generate_dataset(n: int, seed: int, out: str | os.PathLike, length: int = TRAJ_LEN) -> list[Path]:
    """Write ``n`` expert trajectories plus ``manifest.txt`` and ``init_states.csv``.

    Trajectory ``i`` is generated from its own stream ``(seed, i)``, so output
    does not depend on worker count.
    """
    if n < 1:
        raise ValueError(f"need at least one trajectory, got {n}")
    if length < 33:
        raise ValueError(f"trajectory length must be >= 33, got {length}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(seed, i, length) for i in range(n)]
    workers = min(_workers(), n)
    if workers > 1 and n >= 32:
        with ProcessPoolExecutor(workers) as pool:
            blobs = list(pool.map(_make_one, jobs, chunksize=8))
    else:
        blobs = [_make_one(j) for j in jobs]
    names = []
    for i, blob in enumerate(blobs):
        name = f"traj_{i:06d}.bin"
        (out / name).write_bytes(blob)
        names.append(name)
    (out / "manifest.txt").write_text("".join(f"{n_}\n" for n_ in names))
    rows = ["index,agent_x,agent_y,object_x,object_y,goal_x,goal_y"]
    for i in range(n):
        s = initial_state(seed, i)
        rows.append(",".join([str(i)] + [repr(v) for v in (*s.agent_xy, *s.object_xy, *s.goal_xy)]))
    (out / "init_states.csv").write_text("\n".join(rows) + "\n")
    return [out / n_ for n_ in names]


def load_dataset(path: str | os.PathLike) -> list[Trajectory]:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no manifest.txt in {path}")
    names = [ln.strip() for ln in manifest.read_text().splitlines() if ln.strip()]
    return [read_trajectory(path / n) for n in names]


def load_initial_states(path: str | os.PathLike) -> list[WorldState]:
    lines = (Path(path) / "init_states.csv").read_text().splitlines()[1:]
    out = []
    for ln in lines:
        v = [float(x) for x in ln.split(",")[1:]]
        out.append(WorldState(agent_xy=(v[0], v[1]), object_xy=(v[2], v[3]), goal_xy=(v[4], v[5])))
    return out


# ---------------------------------------------------------------------------
# closed-loop evaluation

# policy(frames (B,H,W) uint8, task_ids (B,) int) -> chunks (B,k,3).
# A policy with ``privileged = True`` is called with the list of states instead.
BatchPolicy = Callable[[np.ndarray, np.ndarray], np.ndarray]


def evaluate_closed_loop(
    policy: BatchPolicy,
    episodes: int,
    seed: int,
    execute: int = 8,
    max_steps: int = 80,
    size: int = FRAME_SIZE,
) -> float:
    """Success rate over seeded episodes, replanning every ``execute`` actions.

    All episodes advance in lockstep so the policy is queried in batches.
    """
    states = [random_state(np.random.default_rng([seed, 10_000 + i])) for i in range(episodes)]
    done = [False] * episodes
    t = 0
    while t < max_steps and not all(done):
        live = [i for i in range(episodes) if not done[i]]
        if getattr(policy, "privileged", False):
            chunks = policy([states[i] for i in live])
        else:
            frames = np.stack([render(states[i], size) for i in live])
            tasks = np.array([states[i].task_id for i in live])
            chunks = policy(frames, tasks)
        chunks = np.asarray(chunks, dtype=np.float64)
        n_exec = min(execute, chunks.shape[1], max_steps - t)
        for row, i in enumerate(live):
            for j in range(n_exec):
                states[i] = step(states[i], chunks[row, j])
                if states[i].solved():
                    done[i] = True
                    break
        t += n_exec
    return sum(done) / episodes


class ExpertPolicy:
    """The scripted expert exposed as a chunking policy.

    Each chunk is the expert's own open-loop plan, obtained by simulating the
    deterministic world ``k`` steps ahead.
    """

    privileged = True

    def __init__(self, k: int = 16):
        self.k = k

    def __call__(self, states: Sequence[WorldState]) -> np.ndarray:
        out = np.zeros((len(states), self.k, ACTION_DIM))
        for b, s in enumerate(states):
            for j in range(self.k):
                a = expert_policy(s)
                out[b, j] = a
                s = step(s, a)
        return out


def zero_policy(frames: np.ndarray, tasks: np.ndarray, k: int = 16) -> np.ndarray:
    return np.zeros((len(frames), k, ACTION_DIM))
