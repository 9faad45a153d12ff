"""Synthetic imitation-learning tasks, demonstrations and rollout evaluation.

Environments are batched: a state holds ``n`` independent episodes and every
method works on all of them at once. Transitions are deterministic; the only
randomness is in :meth:`ToyEnv.reset`.

Dataset files (``MAILDS1``), all little-endian::

    b"MAILDS1"
    u32 len, task name (UTF-8)
    i32 n, obs_dim, act_dim, cond_dim, seed
    n records of:
        i32 steps, i32 success, i32 label
        f64[steps * obs_dim] observations
        f64[steps * act_dim] actions
        f64[cond_dim]        conditioning
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

DATASET_MAGIC = b"MAILDS1"

MAX_STEP = 0.1
SUCCESS_RADIUS = 0.1


class DimensionError(ValueError):
    """Policy and environment disagree on observation/action sizes."""


class DatasetFormatError(ValueError):
    pass


# ------------------------------------------------------------------ datasets

@dataclass
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    conditioning: np.ndarray | None = None
    success: bool = True
    label: int = 0

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        if len(self.observations) != len(self.actions):
            raise ValueError("observations and actions must have equal step counts")

    @property
    def steps(self) -> int:
        return len(self.actions)


@dataclass
class DemoDataset:
    task: str
    seed: int
    obs_dim: int
    act_dim: int
    trajectories: list[Trajectory] = field(default_factory=list)
    cond_dim: int = 0

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def total_steps(self) -> int:
        return sum(t.steps for t in self.trajectories)

    def to_bytes(self) -> bytes:
        name = self.task.encode("utf-8")
        out = [DATASET_MAGIC, struct.pack("<I", len(name)), name,
               struct.pack("<5i", len(self.trajectories), self.obs_dim, self.act_dim,
                           self.cond_dim, self.seed)]
        for tr in self.trajectories:
            out.append(struct.pack("<3i", tr.steps, int(tr.success), tr.label))
            out.append(tr.observations.astype("<f8").tobytes())
            out.append(tr.actions.astype("<f8").tobytes())
            if self.cond_dim:
                out.append(np.asarray(tr.conditioning, dtype="<f8").reshape(self.cond_dim).tobytes())
        return b"".join(out)

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DemoDataset":
        if buf[:7] != DATASET_MAGIC:
            raise DatasetFormatError("not a MAILDS1 dataset")
        try:
            pos = 7
            (nlen,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            task = buf[pos:pos + nlen].decode("utf-8")
            pos += nlen
            n, obs_dim, act_dim, cond_dim, seed = struct.unpack_from("<5i", buf, pos)
            pos += 20
            trajs = []
            for _ in range(n):
                steps, success, label = struct.unpack_from("<3i", buf, pos)
                pos += 12
                obs = np.frombuffer(buf, "<f8", steps * obs_dim, pos).reshape(steps, obs_dim)
                pos += 8 * steps * obs_dim
                act = np.frombuffer(buf, "<f8", steps * act_dim, pos).reshape(steps, act_dim)
                pos += 8 * steps * act_dim
                cond = None
                if cond_dim:
                    cond = np.frombuffer(buf, "<f8", cond_dim, pos).astype(np.float64)
                    pos += 8 * cond_dim
                trajs.append(Trajectory(obs.astype(np.float64), act.astype(np.float64), cond,
                                        bool(success), label))
        except (struct.error, ValueError) as exc:
            raise DatasetFormatError(f"truncated or corrupt dataset: {exc}") from exc
        if pos != len(buf):
            raise DatasetFormatError("trailing bytes after dataset records")
        return cls(task, seed, obs_dim, act_dim, trajs, cond_dim)

    def save(self, path) -> None:
        _atomic_write(Path(path), self.to_bytes())

    @classmethod
    def load(cls, path) -> "DemoDataset":
        return cls.from_bytes(Path(path).read_bytes())


def _atomic_write(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def make_windows(ds: DemoDataset, K: int, J: int):
    """All (history, action chunk) training pairs of a dataset.

    History windows are zero-padded before the first step; action chunks
    running past the end of a demonstration are padded with zero actions.
    Returns (S, A, cond) shaped (M, K, obs_dim), (M, J, act_dim), (M, cond_dim) or None.
    """
    S, A, C = [], [], []
    for tr in ds.trajectories:
        n = tr.steps
        obs = np.concatenate([np.zeros((K - 1, ds.obs_dim)), tr.observations])
        act = np.concatenate([tr.actions, np.zeros((J - 1, ds.act_dim))])
        idx_o = np.arange(n)[:, None] + np.arange(K)[None, :]
        idx_a = np.arange(n)[:, None] + np.arange(J)[None, :]
        S.append(obs[idx_o])
        A.append(act[idx_a])
        if ds.cond_dim:
            C.append(np.tile(tr.conditioning, (n, 1)))
    S = np.concatenate(S) if S else np.zeros((0, K, ds.obs_dim))
    A = np.concatenate(A) if A else np.zeros((0, J, ds.act_dim))
    cond = np.concatenate(C) if C else None
    return S, A, cond


def subsample_dataset(ds: DemoDataset, fraction: float, seed: int) -> DemoDataset:
    """Seeded uniform subset of ceil(fraction * n) trajectories, original order kept."""
    if not (0 < fraction <= 1):
        raise ValueError("fraction must lie in (0, 1]")
    n = len(ds)
    m = math.ceil(round(fraction * n, 9))
    if m == 0:
        raise ValueError("subsample would be empty")
    if m == n:
        keep = range(n)
    else:
        keep = np.sort(np.random.default_rng(seed).choice(n, size=m, replace=False))
    return replace(ds, trajectories=[ds.trajectories[i] for i in keep])


# -------------------------------------------------------------- environments

@dataclass
class EnvState:
    pos: np.ndarray          # (n, 2)
    t: np.ndarray            # (n,)
    label: np.ndarray        # (n,) expert goal choice or cue index

    def copy(self) -> "EnvState":
        return EnvState(self.pos.copy(), self.t.copy(), self.label.copy())


def _clip_step(action: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(action, axis=-1, keepdims=True)
    scale = np.minimum(1.0, MAX_STEP / np.maximum(norm, 1e-300))
    return action * scale


def _toward(pos: np.ndarray, goal: np.ndarray) -> np.ndarray:
    return _clip_step(goal - pos)


class ToyEnv:
    name: str
    obs_dim: int
    act_dim: int = 2
    horizon: int

    def reset(self, rng: np.random.Generator, n: int) -> EnvState:
        raise NotImplementedError

    def observe(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def step(self, state: EnvState, action: np.ndarray, active: np.ndarray | None = None) -> EnvState:
        raise NotImplementedError

    def success(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def expert_action(self, state: EnvState) -> np.ndarray:
        raise NotImplementedError

    def expert_from_history(self, hist: np.ndarray) -> np.ndarray:
        """Scripted expert acting only on an observation window (n, K, obs_dim)."""
        raise NotImplementedError

    def state_from_observation(self, obs0: np.ndarray, label: int) -> EnvState:
        raise NotImplementedError


class MultimodalReachEnv(ToyEnv):
    """2-D point mass with two equally valid goals at (-1, 1) and (1, 1).

    Episodes start on the axis between the goals with a random height.
    Observation: agent position followed by both goal positions (constant
    distractors). Success: within SUCCESS_RADIUS of either goal.
    """

    name = "multimodal-reach"
    obs_dim = 6
    horizon = 40
    goals = np.array([[-1.0, 1.0], [1.0, 1.0]])
    # starts lie on the symmetry axis x = 0, so the start state says nothing about the goal
    start_spread = 0.2

    def reset(self, rng, n):
        y = rng.uniform(-self.start_spread, self.start_spread, size=n)
        pos = np.stack([np.zeros(n), y], axis=1)
        return EnvState(pos, np.zeros(n, dtype=np.int64), rng.integers(0, 2, size=n))

    def observe(self, state):
        n = len(state.pos)
        return np.concatenate([state.pos, np.tile(self.goals.reshape(1, -1), (n, 1))], axis=1)

    def step(self, state, action, active=None):
        new = state.copy()
        move = _clip_step(np.asarray(action, dtype=np.float64))
        if active is not None:
            move = move * active[:, None]
        new.pos = state.pos + move
        new.t = state.t + (1 if active is None else active.astype(np.int64))
        return new

    def success(self, state):
        d = np.linalg.norm(state.pos[:, None, :] - self.goals[None], axis=-1)
        return d.min(axis=1) <= SUCCESS_RADIUS

    def expert_action(self, state):
        return _toward(state.pos, self.goals[state.label])

    def expert_from_history(self, hist):
        pos = hist[:, -1, :2]
        label = (pos[:, 0] > 0).astype(np.int64)
        return _toward(pos, self.goals[label])

    def state_from_observation(self, obs0, label):
        return EnvState(np.asarray(obs0[:2], dtype=np.float64)[None].copy(),
                        np.zeros(1, dtype=np.int64), np.array([label]))


class DelayedCueEnv(ToyEnv):
    """Cue-then-act task that can only be solved with observation history.

    For the first ``k_needed`` steps the agent is locked in place and the
    observation carries a cue (+1 or -1) naming the target (cue, 1). From step
    ``k_needed`` on the cue reads 0 and the agent may move. Success: within
    SUCCESS_RADIUS of the cued target.
    """

    obs_dim = 3

    def __init__(self, k_needed: int = 3):
        if k_needed < 2:
            raise ValueError("k_needed must be at least 2")
        self.k_needed = k_needed
        self.name = f"delayed-cue-k{k_needed}"
        self.horizon = k_needed + 25

    def targets(self, label: np.ndarray) -> np.ndarray:
        x = np.where(np.asarray(label) == 1, 1.0, -1.0)
        return np.stack([x, np.ones_like(x)], axis=-1)

    def reset(self, rng, n):
        pos = rng.uniform(-0.05, 0.05, size=(n, 2))
        return EnvState(pos, np.zeros(n, dtype=np.int64), rng.integers(0, 2, size=n))

    def observe(self, state):
        cue = np.where(state.label == 1, 1.0, -1.0) * (state.t < self.k_needed)
        return np.concatenate([state.pos, cue[:, None]], axis=1)

    def step(self, state, action, active=None):
        new = state.copy()
        free = state.t >= self.k_needed
        if active is not None:
            free = free & active
        move = _clip_step(np.asarray(action, dtype=np.float64)) * free[:, None]
        new.pos = state.pos + move
        new.t = state.t + (1 if active is None else active.astype(np.int64))
        return new

    def success(self, state):
        return np.linalg.norm(state.pos - self.targets(state.label), axis=-1) <= SUCCESS_RADIUS

    def expert_action(self, state):
        act = _toward(state.pos, self.targets(state.label))
        return act * (state.t >= self.k_needed)[:, None]

    def expert_from_history(self, hist):
        cue = hist[:, :, 2]
        seen = np.abs(cue).max(axis=1) > 0
        pos = hist[:, -1, :2]
        cue_now = hist[:, -1, 2]
        # remembered cue if still in the window, else the side already committed to
        side = np.where(seen, np.sign(cue.sum(axis=1)), np.sign(pos[:, 0]))
        label = (side > 0).astype(np.int64)
        act = _toward(pos, self.targets(label))
        return act * (cue_now == 0)[:, None]

    def state_from_observation(self, obs0, label):
        return EnvState(np.asarray(obs0[:2], dtype=np.float64)[None].copy(),
                        np.zeros(1, dtype=np.int64), np.array([label]))


def make_env(task: str) -> ToyEnv:
    if task == "multimodal-reach":
        return MultimodalReachEnv()
    if task.startswith("delayed-cue"):
        suffix = task[len("delayed-cue"):]
        k = int(suffix[2:]) if suffix.startswith("-k") else 3
        return DelayedCueEnv(k)
    raise ValueError(f"no environment for task {task!r}")


# ------------------------------------------------------------- generation

def _collect(env: ToyEnv, state: EnvState):
    """Roll the scripted expert in one environment until success or horizon."""
    obs, acts = [], []
    for _ in range(env.horizon):
        o = env.observe(state)
        a = env.expert_action(state)
        obs.append(o[0])
        acts.append(a[0])
        state = env.step(state, a)
        if env.success(state)[0]:
            return np.array(obs), np.array(acts), True
    return np.array(obs), np.array(acts), False


def _generate(env: ToyEnv, n: int, seed: int) -> DemoDataset:
    rng = np.random.default_rng(seed)
    # balanced modes: a seeded shuffle of alternating labels
    labels = rng.permutation(np.arange(n) % 2)
    trajs = []
    for i in range(n):
        state = env.reset(rng, 1)
        state.label[:] = labels[i]
        obs, acts, ok = _collect(env, state)
        trajs.append(Trajectory(obs, acts, None, ok, int(state.label[0])))
    return DemoDataset(env.name, seed, env.obs_dim, env.act_dim, trajs)


def gen_multimodal_reach(n: int, seed: int) -> DemoDataset:
    if n < 2:
        raise ValueError("need at least 2 demonstrations")
    return _generate(MultimodalReachEnv(), n, seed)


def gen_delayed_cue(n: int, k_needed: int, seed: int) -> DemoDataset:
    return _generate(DelayedCueEnv(k_needed), n, seed)


def gen_two_delta(n: int, seed: int) -> DemoDataset:
    """One-step demonstrations with a constant observation and action -1 or +1."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    trajs = [Trajectory(np.ones((1, 1)), np.array([[2.0 * lab - 1.0]]), None, True, int(lab))
             for lab in labels]
    return DemoDataset("two-delta", seed, 1, 1, trajs)


def gen_copy_task(n: int, seed: int) -> DemoDataset:
    """One-step demonstrations whose action equals the 2-D observation."""
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, size=(n, 1, 2))
    trajs = [Trajectory(x[i], x[i].copy(), None, True, 0) for i in range(n)]
    return DemoDataset("copy", seed, 2, 2, trajs)


TASKS = ("multimodal-reach", "delayed-cue-k<K>", "two-delta", "copy")


def generate_dataset(task: str, n: int, seed: int) -> DemoDataset:
    if task == "multimodal-reach":
        return gen_multimodal_reach(n, seed)
    if task.startswith("delayed-cue"):
        return gen_delayed_cue(n, make_env(task).k_needed, seed)
    if task == "two-delta":
        return gen_two_delta(n, seed)
    if task == "copy":
        return gen_copy_task(n, seed)
    raise ValueError(f"unknown task {task!r}")


def task_dims(task: str) -> tuple[int, int]:
    """(obs_dim, act_dim) of a task without generating data."""
    if task == "two-delta":
        return 1, 1
    if task == "copy":
        return 2, 2
    env = make_env(task)
    return env.obs_dim, env.act_dim


def replay(env: ToyEnv, tr: Trajectory):
    """Re-execute recorded actions; returns (observations, success)."""
    state = env.state_from_observation(tr.observations[0], tr.label)
    obs = []
    ok = False
    for a in tr.actions:
        obs.append(env.observe(state)[0])
        state = env.step(state, a[None])
        ok = bool(env.success(state)[0])
    return np.array(obs), ok


# -------------------------------------------------------------- occlusion

@dataclass
class OcclusionConfig:
    rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.rate <= 1.0):
            raise ValueError("occlusion rate must lie in [0, 1]")


def apply_occlusion(obs, cfg: OcclusionConfig, rng: np.random.Generator) -> np.ndarray:
    """Zero each coordinate independently with probability ``cfg.rate``."""
    if not (0.0 <= cfg.rate <= 1.0):
        raise ValueError("occlusion rate must lie in [0, 1]")
    obs = np.asarray(obs, dtype=np.float64)
    if cfg.rate == 0.0:
        return obs.copy()
    keep = rng.random(obs.shape) >= cfg.rate
    return obs * keep


# ------------------------------------------------------------- evaluation

class ScriptedExpertPolicy:
    kind = "expert"

    def __init__(self, env: ToyEnv, K: int = 1, J: int = 1):
        self.env, self.K, self.J = env, K, J
        self.obs_dim, self.act_dim = env.obs_dim, env.act_dim

    def predict(self, s_hist, rng=None, cond=None):
        a = self.env.expert_from_history(np.asarray(s_hist))
        return np.repeat(a[:, None, :], self.J, axis=1)


class RandomPolicy:
    kind = "random"

    def __init__(self, obs_dim: int, act_dim: int = 2, K: int = 1, J: int = 1):
        self.obs_dim, self.act_dim, self.K, self.J = obs_dim, act_dim, K, J

    def predict(self, s_hist, rng, cond=None):
        n = len(s_hist)
        return rng.uniform(-MAX_STEP, MAX_STEP, size=(n, self.J, self.act_dim))


@dataclass
class RolloutResult:
    success_rate: float
    episodes: list[dict]


def rollout_evaluate(policy, env: ToyEnv, episodes: int, seed: int,
                     occlusion: OcclusionConfig | None = None, execute: int = 1,
                     cond=None) -> RolloutResult:
    """Run ``episodes`` seeded episodes in lockstep with receding-horizon control.

    The policy sees the last K observations (zero-padded at episode start) and
    the first ``execute`` actions of each predicted chunk are applied before
    replanning. Occlusion, if given, is applied to every fresh observation.
    """
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    if policy.obs_dim != env.obs_dim or policy.act_dim != env.act_dim:
        raise DimensionError(
            f"policy expects obs/act dims ({policy.obs_dim}, {policy.act_dim}), "
            f"environment provides ({env.obs_dim}, {env.act_dim})")
    if not (1 <= execute <= policy.J):
        raise ValueError("execute must be between 1 and the action horizon J")
    env_rng, pol_rng, occ_rng = (np.random.default_rng(s)
                                 for s in np.random.SeedSequence(seed).spawn(3))
    state = env.reset(env_rng, episodes)
    hist = np.zeros((episodes, policy.K, env.obs_dim))
    done = np.zeros(episodes, dtype=bool)
    steps = np.zeros(episodes, dtype=np.int64)
    plan = np.zeros((episodes, policy.J, env.act_dim))
    for step in range(env.horizon):
        obs = env.observe(state)
        if occlusion is not None:
            obs = apply_occlusion(obs, occlusion, occ_rng)
        hist = np.concatenate([hist[:, 1:], obs[:, None, :]], axis=1)
        active = ~done
        k = step % execute
        if k == 0:
            idx = np.flatnonzero(active)
            c = None if cond is None else np.asarray(cond)[idx]
            plan[idx] = policy.predict(hist[idx], pol_rng, c)
        state = env.step(state, plan[:, k], active)
        steps += active
        done |= env.success(state) & active
        if done.all():
            break
    log = [{"episode": i, "success": bool(done[i]), "steps": int(steps[i])} for i in range(episodes)]
    return RolloutResult(float(done.mean()), log)
