"""Synthetic action data and a point-mass multi-task environment.

The environment is a 2-D point mass in ``[-1, 1]^2`` that has to visit an
ordered list of waypoints, optionally dwelling at some of them. A scripted
proportional controller solves every task and supplies demonstrations.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

DT = 0.1
TOLERANCE = 0.05
HORIZON = 120
MAX_WAYPOINTS = 3
EXPERT_GAIN = 1.0 / DT  # lands exactly on a waypoint once within one step of it


# -- synthetic chunks ----------------------------------------------------------


@dataclass
class TrajectoryDatasetSpec:
    modes: int = 8
    chunks_per_mode: int = 512
    horizon: int = 8  # T
    action_dim: int = 2  # A
    noise: float = 0.05  # sigma
    jitter: float = 1.25  # per-chunk amplitude/phase spread, in units of sigma
    seed: int = 0

    def __post_init__(self):
        if self.modes < 2:
            raise ValueError("need at least two modes")
        if self.noise < 0:
            raise ValueError("noise scale must be non-negative")
        if self.jitter < 0:
            raise ValueError("jitter must be non-negative")


def _pattern(amp, phase, horizon: int, action_dim: int) -> np.ndarray:
    amp, phase = np.asarray(amp, float), np.asarray(phase, float)
    t = np.arange(horizon)[:, None]
    a = np.arange(action_dim)[None, :]
    return amp[..., None, None] * np.sin(2 * np.pi * t / horizon + phase[..., None, None] + a * np.pi / 2)


def mode_parameters(modes: int) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and phase per mode: phase ``2 pi j / M``, odd modes louder."""
    j = np.arange(modes)
    return 0.5 + 0.3 * (j % 2), 2 * np.pi * j / modes


def mode_patterns(modes: int, horizon: int, action_dim: int) -> np.ndarray:
    """Noise-free action pattern per mode, ``(M, T, A)``; action dims are quarter-period shifted."""
    return _pattern(*mode_parameters(modes), horizon, action_dim)


def gen_trajectories(spec: TrajectoryDatasetSpec) -> tuple[np.ndarray, np.ndarray]:
    """Chunks ``(M * n, T, A)`` clipped to [-1, 1] and their mode labels.

    Each chunk is its mode's sinusoid with amplitude and phase perturbed by
    ``N(0, (jitter * sigma)^2)``, plus white noise of scale ``sigma``. The
    smooth perturbation gives every mode a continuum of variants worth
    encoding, so codes beyond one per mode carry information.
    """
    amp, phase = mode_parameters(spec.modes)
    rng = np.random.default_rng(spec.seed)
    labels = np.repeat(np.arange(spec.modes), spec.chunks_per_mode)
    spread = spec.jitter * spec.noise
    a = amp[labels] + spread * rng.standard_normal(len(labels))
    p = phase[labels] + spread * rng.standard_normal(len(labels))
    base = _pattern(a, p, spec.horizon, spec.action_dim)
    noise = rng.standard_normal(base.shape)
    chunks = np.clip(base + spec.noise * noise, -1.0, 1.0)
    return chunks, labels


def composite_clusters(n_clusters: int = 200, dim: int = 8, coarse: int = 16, per_cluster: int = 20,
                       coarse_scale: float = 10.0, fine_scale: float = 0.5, noise: float = 0.01,
                       seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Separated clusters whose centers are a coarse vector plus a fine offset.

    Centers are ``a_i + b_j`` with ``coarse`` coarse vectors and
    ``ceil(n_clusters / coarse)`` shared offsets, filled offset by offset so
    every coarse group holds nearly the same offsets. Returns points
    ``(n_clusters * per_cluster, dim)`` and their cluster ids.
    """
    rng = np.random.default_rng(seed)
    fine = -(-n_clusters // coarse)
    a = coarse_scale * rng.standard_normal((coarse, dim))
    b = fine_scale * rng.standard_normal((fine, dim))
    pairs = [(i, j) for j in range(fine) for i in range(coarse)][:n_clusters]
    centers = np.array([a[i] + b[j] for i, j in pairs])
    labels = np.repeat(np.arange(n_clusters), per_cluster)
    return centers[labels] + noise * rng.standard_normal((len(labels), dim)), labels


# -- point-mass environment ------------------------------------------------------


@dataclass(frozen=True)
class Task:
    name: str
    waypoints: tuple[tuple[float, float], ...]
    dwell: tuple[int, ...]  # steps inside tolerance required per waypoint (>= 1)


STANDARD_TASKS: tuple[Task, ...] = (
    Task("reach", ((0.6, 0.5),), (1,)),
    Task("l-path", ((0.6, -0.5), (0.6, 0.6)), (1, 1)),
    Task("z-path", ((0.6, 0.6), (-0.6, -0.6), (0.6, -0.6)), (1, 1, 1)),
    Task("dwell", ((-0.5, -0.5), (0.5, 0.5)), (5, 1)),
)


def observation_dim() -> int:
    return 2 + 2 * MAX_WAYPOINTS + (MAX_WAYPOINTS + 1)


class PointMassEnv:
    """``x_{t+1} = clip(x_t + a_t * DT, [-1, 1])`` with an ordered waypoint goal.

    ``reset(seed)`` draws the start position in ``[-0.2, 0.2]^2`` and jitters
    every waypoint by up to 0.1 per axis.
    """

    def __init__(self, task_id: int, tasks=STANDARD_TASKS, horizon: int = HORIZON):
        self.tasks = tasks
        self.task_id = task_id
        self.task = tasks[task_id]
        self.horizon = horizon
        self.reset(0)

    def reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng([seed, self.task_id])
        self.pos = rng.uniform(-0.2, 0.2, size=2)
        jitter = rng.uniform(-0.1, 0.1, size=(len(self.task.waypoints), 2))
        self.waypoints = np.asarray(self.task.waypoints) + jitter
        self.stage = 0
        self.dwell_count = 0
        self.steps = 0
        self.success = False
        return self.observe()

    @property
    def n_stages(self) -> int:
        return len(self.waypoints)

    @property
    def done(self) -> bool:
        return self.success or self.steps >= self.horizon

    def observe(self) -> np.ndarray:
        # waypoints still ahead, nearest-in-order first; zeros once passed
        rel = np.zeros((MAX_WAYPOINTS, 2))
        ahead = self.waypoints[self.stage :] - self.pos
        rel[: len(ahead)] = ahead
        stage = np.zeros(MAX_WAYPOINTS + 1)
        stage[self.stage] = 1.0
        return np.concatenate([self.pos, rel.ravel(), stage])

    def step(self, action) -> tuple[np.ndarray, bool]:
        if self.done:
            raise RuntimeError("step() on a finished episode")
        a = np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        self.pos = np.clip(self.pos + DT * a, -1.0, 1.0)
        self.steps += 1
        if not self.success:
            target = self.waypoints[self.stage]
            if np.linalg.norm(self.pos - target) <= TOLERANCE:
                self.dwell_count += 1
                if self.dwell_count >= self.task.dwell[self.stage]:
                    self.stage += 1
                    self.dwell_count = 0
                    self.success = self.stage == self.n_stages
            else:
                self.dwell_count = 0
        return self.observe(), self.success


def scripted_expert(env: PointMassEnv) -> np.ndarray:
    """Proportional controller toward the current waypoint, speed capped at 1."""
    if env.success:
        return np.zeros(2)
    delta = EXPERT_GAIN * (env.waypoints[env.stage] - env.pos)
    speed = np.linalg.norm(delta)
    if speed > 1.0:
        delta = delta / speed
    return delta


# -- demonstrations --------------------------------------------------------------


@dataclass
class Episode:
    task_id: int
    observations: np.ndarray  # (L, obs_dim), observation before each action
    actions: np.ndarray  # (L, 2)
    success: bool = True


@dataclass
class DemoStore:
    episodes: list[Episode] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return sum(len(ep.actions) for ep in self.episodes)

    def windows(self, history: int, horizon: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sliding windows: ``(obs (N, h, o), task (N,), chunks (N, T, A))``.

        Observation windows are front-padded with the first observation,
        action chunks tail-padded with the last action.
        """
        obs, tasks, chunks = [], [], []
        for ep in self.episodes:
            n = len(ep.actions)
            o = np.concatenate([np.repeat(ep.observations[:1], history - 1, 0), ep.observations])
            a = np.concatenate([ep.actions, np.repeat(ep.actions[-1:], horizon - 1, 0)])
            for t in range(n):
                obs.append(o[t : t + history])
                chunks.append(a[t : t + horizon])
                tasks.append(ep.task_id)
        return np.stack(obs), np.asarray(tasks, dtype=np.int64), np.stack(chunks)

    # file layout: magic, n_episodes, obs_dim, act_dim; per episode: task, length,
    # then observations and actions as little-endian float32
    _MAGIC = b"RDEM1"

    def save(self, path) -> None:
        path = Path(path)
        obs_dim = self.episodes[0].observations.shape[1] if self.episodes else 0
        act_dim = self.episodes[0].actions.shape[1] if self.episodes else 0
        with open(path, "wb") as fh:
            fh.write(struct.pack("<5sIII", self._MAGIC, len(self.episodes), obs_dim, act_dim))
            for ep in self.episodes:
                fh.write(struct.pack("<II", ep.task_id, len(ep.actions)))
                fh.write(np.ascontiguousarray(ep.observations, dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(ep.actions, dtype="<f4").tobytes())
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "DemoStore":
        path = Path(path)
        data = path.read_bytes()
        magic, n_ep, obs_dim, act_dim = struct.unpack_from("<5sIII", data, 0)
        if magic != cls._MAGIC:
            raise ValueError(f"{path} is not a demonstration store")
        pos = struct.calcsize("<5sIII")
        episodes = []
        for _ in range(n_ep):
            task, length = struct.unpack_from("<II", data, pos)
            pos += 8
            o = np.frombuffer(data, "<f4", length * obs_dim, pos).reshape(length, obs_dim)
            pos += 4 * length * obs_dim
            a = np.frombuffer(data, "<f4", length * act_dim, pos).reshape(length, act_dim)
            pos += 4 * length * act_dim
            episodes.append(Episode(task, o.astype(np.float32), a.astype(np.float32)))
        sidecar = path.with_suffix(path.suffix + ".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(episodes, meta)


class ExpertFailure(RuntimeError):
    pass


def run_expert_episode(task_id: int, seed: int, tasks=STANDARD_TASKS, horizon: int = HORIZON,
                       action_noise: float = 0.0) -> Episode:
    """One expert episode. With ``action_noise > 0`` the executed action is
    perturbed by Gaussian noise while the stored label stays the clean expert
    action, so the data covers states slightly off the expert's path."""
    env = PointMassEnv(task_id, tasks, horizon)
    obs = env.reset(seed)
    rng = np.random.default_rng([seed, task_id, 1])
    observations, actions = [], []
    while not env.done:
        action = scripted_expert(env)
        observations.append(obs)
        actions.append(action)
        executed = action + action_noise * rng.standard_normal(2) if action_noise > 0 else action
        obs, _ = env.step(executed)
    return Episode(task_id, np.asarray(observations, np.float32), np.asarray(actions, np.float32), env.success)


def collect_demos(episodes_per_task: int = 50, seed: int = 0, tasks=STANDARD_TASKS,
                  horizon: int = HORIZON, action_noise: float = 0.0) -> DemoStore:
    """Expert rollouts for every task; episode ``i`` of a task uses env seed ``seed * 100003 + i``."""
    store = DemoStore(meta={"episodes_per_task": episodes_per_task, "seed": seed, "horizon": horizon,
                            "action_noise": action_noise, "tasks": [asdict(t) for t in tasks]})
    for task_id in range(len(tasks)):
        for i in range(episodes_per_task):
            ep = run_expert_episode(task_id, seed * 100003 + i, tasks, horizon, action_noise)
            if not ep.success:
                raise ExpertFailure(f"scripted expert failed task {tasks[task_id].name!r} (episode {i})")
            store.episodes.append(ep)
    return store
