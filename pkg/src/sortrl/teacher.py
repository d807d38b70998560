"""DQN teacher and the expert dataset it produces.

The teacher is an ordinary ReLU MLP trained with DQN (target network,
uniform replay, linear epsilon-greedy). Observations are normalised by a
running normaliser that is snapshotted together with the best greedy
checkpoint and frozen for everything downstream.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .envs import Env, ObsNormalizer, make_env, rollout_batch
from .numerics import AdamWState, ParamStore, Tensor

log = logging.getLogger(__name__)


class TeacherTrainingError(RuntimeError):
    pass


class UsageError(RuntimeError):
    pass


class DatasetError(ValueError):
    pass


class QNetwork:
    def __init__(self, obs_dim: int, n_actions: int, hidden=(64, 64), seed: int = 0):
        self.obs_dim, self.n_actions, self.hidden = obs_dim, n_actions, tuple(hidden)
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        sizes = (obs_dim, *self.hidden, n_actions)
        for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            self.params.add(f"fc{i}.w", rng.uniform(-bound, bound, (fan_out, fan_in)))
            self.params.add(f"fc{i}.b", rng.uniform(-bound, bound, fan_out))
        self.n_layers = len(sizes) - 1

    def forward(self, x) -> Tensor:
        h = nx.as_tensor(x)
        for i in range(self.n_layers):
            h = nx.affine(h, self.params[f"fc{i}.w"], self.params[f"fc{i}.b"])
            if i < self.n_layers - 1:
                h = nx.relu(h)
        return h

    def q_values(self, x) -> np.ndarray:
        h = np.asarray(x, dtype=np.float64)
        for i in range(self.n_layers):
            h = h @ self.params[f"fc{i}.w"].data.T + self.params[f"fc{i}.b"].data
            if i < self.n_layers - 1:
                h = np.maximum(h, 0.0)
        return h

    def copy(self) -> "QNetwork":
        out = QNetwork(self.obs_dim, self.n_actions, self.hidden)
        out.params.copy_from(self.params)
        return out


class Teacher:
    """Greedy policy over Q-values acting on normalised observations."""

    def __init__(self, qnet: QNetwork, normalizer: ObsNormalizer, env_name: str,
                 accepted: bool = False, eval_return: float = float("nan")):
        self.qnet, self.normalizer, self.env_name = qnet, normalizer, env_name
        self.accepted, self.eval_return = accepted, eval_return

    @property
    def n_actions(self) -> int:
        return self.qnet.n_actions

    def forward(self, x) -> Tensor:
        return self.qnet.forward(x)

    def scores(self, x) -> np.ndarray:
        return self.qnet.q_values(x)

    def act(self, x):
        q = self.scores(x)
        a = np.argmax(q, axis=-1)
        return int(a) if np.ndim(a) == 0 else a

    def frozen(self):
        return _FrozenParams(self.qnet.params)

    def save(self, path) -> None:
        arrays = {"meta": np.array([self.qnet.obs_dim, self.qnet.n_actions, float(self.accepted),
                                    self.eval_return, *self.qnet.hidden], dtype=np.float64)}
        arrays.update(self.qnet.params.arrays())
        arrays["normalizer.mean"] = self.normalizer.mean
        arrays["normalizer.var"] = self.normalizer.var
        nx.checkpoint.save(path, arrays)

    @classmethod
    def load(cls, path, env_name: str) -> "Teacher":
        arrays = nx.checkpoint.load(path)
        meta = arrays["meta"]
        obs_dim, n_actions, accepted, ret = int(meta[0]), int(meta[1]), bool(meta[2]), float(meta[3])
        hidden = tuple(int(h) for h in meta[4:])
        q = QNetwork(obs_dim, n_actions, hidden)
        q.params.load_arrays({k: v for k, v in arrays.items() if k in q.params})
        norm = ObsNormalizer.from_stats(arrays["normalizer.mean"], arrays["normalizer.var"])
        return cls(q, norm, env_name, accepted, ret)


class _FrozenParams:
    def __init__(self, params: ParamStore):
        self.params = params

    def __enter__(self):
        self.saved = [p.requires_grad for _, p in self.params.items()]
        for _, p in self.params.items():
            p.requires_grad = False
        return self

    def __exit__(self, *exc):
        for (_, p), r in zip(self.params.items(), self.saved):
            p.requires_grad = r


class ScriptedCartPoleExpert:
    """Linear state-feedback controller for CartPole (fast stand-in teacher for CI).

    Pushes right when ``k · s > 0`` on the raw state; the gains keep the
    pole upright and the cart near the centre for the full episode.
    """

    gains = np.array([0.05, 0.3, 1.0, 0.5])

    def __init__(self, normalizer: ObsNormalizer):
        self.normalizer = normalizer
        self.env_name = "cartpole"
        self.accepted = True
        self.n_actions = 2

    def scores(self, x) -> np.ndarray:
        raw = np.asarray(x) * np.sqrt(self.normalizer.var + self.normalizer.eps) + self.normalizer.mean
        u = raw @ self.gains
        return np.stack([-u, u], axis=-1)

    def act(self, x):
        a = np.argmax(self.scores(x), axis=-1)
        return int(a) if np.ndim(a) == 0 else a


# ---------------------------------------------------------------------------
# DQN
# ---------------------------------------------------------------------------

class ReplayBuffer:
    def __init__(self, capacity: int, obs_dim: int, seed: int = 0):
        self.capacity = capacity
        self.obs = np.zeros((capacity, obs_dim))
        self.next_obs = np.zeros((capacity, obs_dim))
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.dones = np.zeros(capacity)
        self.size = 0
        self.pos = 0
        self.rng = np.random.default_rng(seed)

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s2, done) -> None:
        i = self.pos
        self.obs[i], self.actions[i], self.rewards[i], self.next_obs[i], self.dones[i] = s, a, r, s2, done
        self.pos = (self.pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, n: int):
        idx = self.rng.integers(0, self.size, size=n)
        return self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx], self.dones[idx]


ACCEPT_RETURN = {"cartpole": 475.0, "acrobot": -100.0, "mountaincar": -130.0}


@dataclass
class TeacherConfig:
    total_steps: int = 150_000
    gamma: float = 0.99
    buffer_size: int = 100_000
    batch_size: int = 64
    lr: float = 1e-3
    target_sync: int = 1000
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_fraction: float = 0.2
    learning_starts: int = 1000
    train_every: int = 1
    hidden: tuple = (64, 64)
    grad_clip: float = 10.0
    eval_every: int = 5000
    eval_episodes: int = 10
    accept_episodes: int = 20
    accept_return: float | None = None

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


@dataclass
class TeacherLogRow:
    step: int
    episodes: int
    epsilon: float
    mean_loss: float
    eval_return: float


def greedy_returns(policy, env_name: str, normalizer: ObsNormalizer, seeds) -> np.ndarray:
    trajs = rollout_batch(policy, env_name, normalizer, list(seeds))
    return np.array([t.total_return for t in trajs])


def _eval_seeds(seed: int, n: int, tag: int) -> list[int]:
    ss = np.random.SeedSequence([seed, tag])
    return [int(v) for v in ss.generate_state(n)]


def train_teacher(env: Env | str, config: TeacherConfig | None = None, seed: int = 0,
                  require_acceptance: bool = True):
    """Train a DQN teacher; returns (Teacher, frozen normaliser, log rows).

    The best greedy snapshot seen at periodic evaluations is kept. Raises
    ``TeacherTrainingError`` if it never reaches the acceptance return.
    """
    config = config or TeacherConfig()
    env = make_env(env) if isinstance(env, str) else env
    threshold = config.accept_return if config.accept_return is not None else ACCEPT_RETURN[env.name]
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    qnet = QNetwork(env.obs_dim, env.n_actions, config.hidden, seed=seed)
    target = qnet.copy()
    opt = AdamWState(lr=config.lr, weight_decay=0.0)
    buffer = ReplayBuffer(config.buffer_size, env.obs_dim, seed=seed + 7)
    normalizer = ObsNormalizer(env.obs_dim)
    rows: list[TeacherLogRow] = []

    if config.total_steps <= 0:
        teacher = Teacher(qnet, normalizer.freeze(), env.name, accepted=False)
        return teacher, teacher.normalizer, rows

    best = (-math.inf, None, None)
    episode_seeds = np.random.SeedSequence([seed, 2])
    ep = 0
    obs = env.reset(seed=int(episode_seeds.generate_state(1)[0]))
    normalizer.update(obs)
    losses: list[float] = []
    eval_seeds = _eval_seeds(seed, config.eval_episodes, 3)
    for step in range(1, config.total_steps + 1):
        frac = min(1.0, step / max(1.0, config.eps_fraction * config.total_steps))
        epsilon = config.eps_start + frac * (config.eps_end - config.eps_start)
        if rng.random() < epsilon:
            action = int(rng.integers(env.n_actions))
        else:
            action = int(np.argmax(qnet.q_values(normalizer(obs))))
        next_obs, reward, done = env.step(action)
        # time-limit truncation is not a terminal state for bootstrapping
        terminal = done and env.steps < env.max_steps
        buffer.add(obs, action, reward, next_obs, float(terminal))
        normalizer.update(next_obs)
        obs = next_obs
        if done:
            ep += 1
            obs = env.reset(seed=int(np.random.SeedSequence([seed, 2, ep]).generate_state(1)[0]))
            normalizer.update(obs)

        if step >= config.learning_starts and step % config.train_every == 0:
            losses.append(_dqn_update(qnet, target, opt, buffer, normalizer, config))
        if step % config.target_sync == 0:
            target.params.copy_from(qnet.params)

        if step % config.eval_every == 0 or step == config.total_steps:
            snap = normalizer.copy().freeze()
            ret = greedy_returns(Teacher(qnet, snap, env.name), env.name, snap, eval_seeds).mean()
            rows.append(TeacherLogRow(step, ep, epsilon, float(np.mean(losses)) if losses else float("nan"), ret))
            log.info("teacher step %d eps %.3f loss %.4f eval %.1f", step, epsilon, rows[-1].mean_loss, ret)
            losses = []
            if ret > best[0]:
                best = (ret, qnet.copy(), snap)
            if ret >= max(threshold, _cap_return(env)) and step >= config.learning_starts:
                break

    _, best_q, best_norm = best
    teacher = Teacher(best_q, best_norm, env.name)
    accept = greedy_returns(teacher, env.name, best_norm, _eval_seeds(seed, config.accept_episodes, 4)).mean()
    teacher.eval_return = float(accept)
    teacher.accepted = bool(accept >= threshold)
    if require_acceptance and not teacher.accepted:
        raise TeacherTrainingError(
            f"{env.name} teacher reached {accept:.1f} < required {threshold:.1f} within {config.total_steps} steps")
    return teacher, best_norm, rows


def _cap_return(env: Env) -> float:
    # early stop only at the perfect score where one exists
    return float(env.max_steps) if env.name == "cartpole" else math.inf


def _dqn_update(qnet, target, opt, buffer, normalizer, config) -> float:
    s, a, r, s2, d = buffer.sample(config.batch_size)
    s, s2 = normalizer(s), normalizer(s2)
    next_q = target.q_values(s2).max(axis=1)
    y = r + config.gamma * (1.0 - d) * next_q
    q = qnet.forward(s)
    td = nx.sub(nx.pick(q, a), y)
    loss = nx.mean(nx.square(td))
    loss.backward()
    if config.grad_clip:
        norm = math.sqrt(sum(float((p.grad ** 2).sum()) for _, p in qnet.params.items()))
        if norm > config.grad_clip:
            for _, p in qnet.params.items():
                p.grad = p.grad * (config.grad_clip / norm)
    nx.adamw_step(qnet.params, opt)
    return loss.item()


# ---------------------------------------------------------------------------
# expert dataset
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"SRTD"
DATASET_VERSION = 1


@dataclass
class ExpertDataset:
    states: np.ndarray
    actions: np.ndarray
    env_name: str
    n_actions: int
    normalizer: ObsNormalizer

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2:
            self.states = self.states.reshape(len(self.actions), -1)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        if self.actions.size and (self.actions.min() < 0 or self.actions.max() >= self.n_actions):
            raise DatasetError("action id out of range")

    def __len__(self) -> int:
        return int(self.actions.size)

    @property
    def obs_dim(self) -> int:
        return self.states.shape[1]

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        name = self.env_name.encode("utf-8")
        buf.write(DATASET_MAGIC)
        buf.write(struct.pack("<II", DATASET_VERSION, len(name)))
        buf.write(name)
        buf.write(struct.pack("<IIQ", self.n_actions, self.obs_dim, len(self)))
        buf.write(np.ascontiguousarray(self.normalizer.mean, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(self.normalizer.var, dtype="<f8").tobytes())
        rec = np.dtype([("s", "<f8", (self.obs_dim,)), ("a", "<u4")])
        table = np.empty(len(self), dtype=rec)
        table["s"], table["a"] = self.states, self.actions
        buf.write(table.tobytes())
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ExpertDataset":
        if blob[:4] != DATASET_MAGIC:
            raise DatasetError("not an expert dataset (bad magic)")
        version, n = struct.unpack_from("<II", blob, 4)
        if version != DATASET_VERSION:
            raise DatasetError(f"unsupported dataset version {version}")
        pos = 12
        name = blob[pos:pos + n].decode("utf-8")
        pos += n
        n_actions, obs_dim, count = struct.unpack_from("<IIQ", blob, pos)
        pos += 16
        mean = np.frombuffer(blob, "<f8", obs_dim, pos).astype(np.float64)
        pos += 8 * obs_dim
        var = np.frombuffer(blob, "<f8", obs_dim, pos).astype(np.float64)
        pos += 8 * obs_dim
        rec = np.dtype([("s", "<f8", (obs_dim,)), ("a", "<u4")])
        if len(blob) - pos != count * rec.itemsize:
            raise DatasetError("record count does not match header")
        table = np.frombuffer(blob, rec, count, pos)
        return cls(table["s"].astype(np.float64), table["a"].astype(np.int64), name, n_actions,
                   ObsNormalizer.from_stats(mean, var))

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ExpertDataset":
        return cls.from_bytes(Path(path).read_bytes())

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["env", self.env_name, "n_actions", self.n_actions])
            w.writerow(["norm_mean", *(repr(float(v)) for v in self.normalizer.mean)])
            w.writerow(["norm_var", *(repr(float(v)) for v in self.normalizer.var)])
            w.writerow([*(f"s{i}" for i in range(self.obs_dim)), "action"])
            for s, a in zip(self.states, self.actions):
                w.writerow([*(repr(float(v)) for v in s), int(a)])


def episode_seed(seed: int, k: int) -> int:
    return int(np.random.SeedSequence([seed, 5, k]).generate_state(1)[0])


def build_dataset(teacher, env_name: str, n_states: int = 50_000, seed: int = 0) -> ExpertDataset:
    """Roll the greedy teacher in the clean env and record (normalised state, action) pairs.

    Episodes use seeds ``episode_seed(seed, k)`` for k = 0, 1, ... and are
    concatenated in order; the last one is truncated at ``n_states``.
    """
    if not getattr(teacher, "accepted", False):
        raise UsageError("teacher has not passed acceptance; refusing to build a dataset")
    normalizer = teacher.normalizer
    if not normalizer.frozen:
        raise UsageError("normaliser must be frozen before dataset construction")
    env = make_env(env_name)
    states, actions = [], []
    k = 0
    while len(actions) < n_states:
        obs = env.reset(seed=episode_seed(seed, k))
        done = False
        while not done and len(actions) < n_states:
            x = normalizer(obs)
            a = int(teacher.act(x))
            states.append(x)
            actions.append(a)
            obs, _, done = env.step(a)
        k += 1
    states_arr = np.array(states).reshape(-1, env.obs_dim)
    return ExpertDataset(states_arr, np.array(actions, dtype=np.int64), env_name, env.n_actions, normalizer)
