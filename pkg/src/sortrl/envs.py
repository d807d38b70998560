"""Classic-control tasks, observation normalisation and the attacked rollout loop.

Physics follow the standard published formulations (Barto/Sutton cart-pole,
Sutton's acrobot, Moore's mountain car) with their usual constants. Every
environment draws its initial state from a generator seeded in ``reset``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np


class DomainError(ValueError):
    pass


class UsageError(RuntimeError):
    pass


class Env:
    name: str = ""
    obs_dim: int = 0
    n_actions: int = 0
    gamma: float = 0.99
    max_steps: int = 0

    def __init__(self):
        self.state: np.ndarray | None = None
        self.steps = 0
        self.done = True
        self._rng = np.random.default_rng(0)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = self._initial_state()
        self.steps = 0
        self.done = False
        return self.observe()

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise UsageError("step() called on a finished episode; call reset()")
        action = int(action)
        if not 0 <= action < self.n_actions:
            raise DomainError(f"{self.name}: invalid action {action}")
        self.state, reward, terminal = self.dynamics(self.state, action)
        self.steps += 1
        self.done = bool(terminal or self.steps >= self.max_steps)
        return self.observe(), reward, self.done

    def observe(self) -> np.ndarray:
        return self.state.copy()

    def _initial_state(self) -> np.ndarray:
        raise NotImplementedError

    def dynamics(self, state: np.ndarray, action: int) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError


class CartPole(Env):
    name = "cartpole"
    obs_dim = 4
    n_actions = 2
    max_steps = 500

    gravity = 9.8
    masscart = 1.0
    masspole = 0.1
    length = 0.5  # half the pole length
    force_mag = 10.0
    tau = 0.02
    theta_limit = 12 * 2 * math.pi / 360
    x_limit = 2.4

    def _initial_state(self):
        return self._rng.uniform(-0.05, 0.05, size=4)

    def dynamics(self, state, action):
        return cartpole_step(state, action)


def cartpole_step(state, action: int):
    c = CartPole
    if action not in (0, 1):
        raise DomainError(f"cartpole: invalid action {action}")
    x, x_dot, theta, theta_dot = (float(v) for v in state)
    force = c.force_mag if action == 1 else -c.force_mag
    total_mass = c.masspole + c.masscart
    polemass_length = c.masspole * c.length
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    temp = (force + polemass_length * theta_dot ** 2 * sin_t) / total_mass
    theta_acc = (c.gravity * sin_t - cos_t * temp) / (
        c.length * (4.0 / 3.0 - c.masspole * cos_t ** 2 / total_mass))
    x_acc = temp - polemass_length * theta_acc * cos_t / total_mass
    x = x + c.tau * x_dot
    x_dot = x_dot + c.tau * x_acc
    theta = theta + c.tau * theta_dot
    theta_dot = theta_dot + c.tau * theta_acc
    terminal = x < -c.x_limit or x > c.x_limit or theta < -c.theta_limit or theta > c.theta_limit
    return np.array([x, x_dot, theta, theta_dot]), 1.0, terminal


class Acrobot(Env):
    """Two-link underactuated swing-up; observations are (cos, sin) of both angles plus velocities."""

    name = "acrobot"
    obs_dim = 6
    n_actions = 3
    max_steps = 500

    dt = 0.2
    link_length_1 = 1.0
    link_mass_1 = 1.0
    link_mass_2 = 1.0
    link_com_pos_1 = 0.5
    link_com_pos_2 = 0.5
    link_moi = 1.0
    max_vel_1 = 4 * math.pi
    max_vel_2 = 9 * math.pi
    torques = (-1.0, 0.0, 1.0)

    def _initial_state(self):
        return self._rng.uniform(-0.1, 0.1, size=4)

    def observe(self):
        t1, t2, d1, d2 = self.state
        return np.array([math.cos(t1), math.sin(t1), math.cos(t2), math.sin(t2), d1, d2])

    def dynamics(self, state, action):
        return acrobot_step(state, action)


def _acrobot_dsdt(s, torque):
    a = Acrobot
    m1, m2 = a.link_mass_1, a.link_mass_2
    l1 = a.link_length_1
    lc1, lc2 = a.link_com_pos_1, a.link_com_pos_2
    i1 = i2 = a.link_moi
    g = 9.8
    theta1, theta2, dtheta1, dtheta2 = s
    d1 = m1 * lc1 ** 2 + m2 * (l1 ** 2 + lc2 ** 2 + 2 * l1 * lc2 * math.cos(theta2)) + i1 + i2
    d2 = m2 * (lc2 ** 2 + l1 * lc2 * math.cos(theta2)) + i2
    phi2 = m2 * lc2 * g * math.cos(theta1 + theta2 - math.pi / 2.0)
    phi1 = (-m2 * l1 * lc2 * dtheta2 ** 2 * math.sin(theta2)
            - 2 * m2 * l1 * lc2 * dtheta2 * dtheta1 * math.sin(theta2)
            + (m1 * lc1 + m2 * l1) * g * math.cos(theta1 - math.pi / 2) + phi2)
    ddtheta2 = (torque + d2 / d1 * phi1 - m2 * l1 * lc2 * dtheta1 ** 2 * math.sin(theta2) - phi2) / (
        m2 * lc2 ** 2 + i2 - d2 ** 2 / d1)
    ddtheta1 = -(d2 * ddtheta2 + phi1) / d1
    return np.array([dtheta1, dtheta2, ddtheta1, ddtheta2])


def _wrap(x: float, lo: float, hi: float) -> float:
    diff = hi - lo
    while x > hi:
        x -= diff
    while x < lo:
        x += diff
    return x


def acrobot_step(state, action: int):
    a = Acrobot
    if action not in (0, 1, 2):
        raise DomainError(f"acrobot: invalid action {action}")
    torque = a.torques[action]
    s = np.asarray(state, dtype=np.float64)
    h = a.dt
    # one classical RK4 step over dt, torque held constant
    k1 = _acrobot_dsdt(s, torque)
    k2 = _acrobot_dsdt(s + h / 2 * k1, torque)
    k3 = _acrobot_dsdt(s + h / 2 * k2, torque)
    k4 = _acrobot_dsdt(s + h * k3, torque)
    ns = s + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    ns[0] = _wrap(ns[0], -math.pi, math.pi)
    ns[1] = _wrap(ns[1], -math.pi, math.pi)
    ns[2] = min(max(ns[2], -a.max_vel_1), a.max_vel_1)
    ns[3] = min(max(ns[3], -a.max_vel_2), a.max_vel_2)
    terminal = -math.cos(ns[0]) - math.cos(ns[1] + ns[0]) > 1.0
    return ns, (0.0 if terminal else -1.0), terminal


class MountainCar(Env):
    name = "mountaincar"
    obs_dim = 2
    n_actions = 3
    max_steps = 200

    min_position = -1.2
    max_position = 0.6
    max_speed = 0.07
    goal_position = 0.5
    force = 0.001
    gravity = 0.0025

    def _initial_state(self):
        return np.array([self._rng.uniform(-0.6, -0.4), 0.0])

    def dynamics(self, state, action):
        return mountaincar_step(state, action)


def mountaincar_step(state, action: int):
    m = MountainCar
    if action not in (0, 1, 2):
        raise DomainError(f"mountaincar: invalid action {action}")
    position, velocity = (float(v) for v in state)
    velocity += (action - 1) * m.force + math.cos(3 * position) * (-m.gravity)
    velocity = min(max(velocity, -m.max_speed), m.max_speed)
    position += velocity
    position = min(max(position, m.min_position), m.max_position)
    if position == m.min_position and velocity < 0:
        velocity = 0.0
    terminal = position >= m.goal_position
    return np.array([position, velocity]), -1.0, terminal


ENVS = {"cartpole": CartPole, "acrobot": Acrobot, "mountaincar": MountainCar}


def make_env(name: str) -> Env:
    try:
        return ENVS[name]()
    except KeyError:
        raise DomainError(f"unknown environment {name!r}; choose one of {sorted(ENVS)}") from None


# ---------------------------------------------------------------------------
# observation normalisation
# ---------------------------------------------------------------------------

class ObsNormalizer:
    """Running per-dimension mean/variance (parallel Welford); frozen = fixed affine map."""

    eps = 1e-8

    def __init__(self, dim: int):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0
        self.frozen = False

    def update(self, obs) -> None:
        if self.frozen:
            return
        batch = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        b_mean, b_var, n = batch.mean(axis=0), batch.var(axis=0), batch.shape[0]
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, b_var, float(n)
            return
        total = self.count + n
        delta = b_mean - self.mean
        self.mean = self.mean + delta * n / total
        m2 = self.var * self.count + b_var * n + delta ** 2 * self.count * n / total
        self.var = m2 / total
        self.count = total

    def freeze(self) -> "ObsNormalizer":
        self.frozen = True
        return self

    def __call__(self, obs) -> np.ndarray:
        return (np.asarray(obs, dtype=np.float64) - self.mean) / np.sqrt(self.var + self.eps)

    transform = __call__

    def copy(self) -> "ObsNormalizer":
        out = ObsNormalizer(self.mean.size)
        out.mean, out.var, out.count, out.frozen = self.mean.copy(), self.var.copy(), self.count, self.frozen
        return out

    @classmethod
    def from_stats(cls, mean, var, frozen: bool = True) -> "ObsNormalizer":
        out = cls(len(mean))
        out.mean = np.array(mean, dtype=np.float64)
        out.var = np.array(var, dtype=np.float64)
        out.count = 1.0
        out.frozen = frozen
        return out

    @classmethod
    def identity(cls, dim: int) -> "ObsNormalizer":
        out = cls.from_stats(np.zeros(dim), np.ones(dim) - cls.eps)
        return out


# ---------------------------------------------------------------------------
# rollouts
# ---------------------------------------------------------------------------

@dataclass
class Trajectory:
    states: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    observations: list = field(default_factory=list)

    @property
    def total_return(self) -> float:
        return float(sum(self.rewards))

    @property
    def length(self) -> int:
        return len(self.actions)


class Policy(Protocol):
    def act(self, states): ...


# perturb(normalized_obs_batch, rng) -> perturbed batch (same shape)
Perturber = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def rollout(policy, env: Env | str, normalizer: ObsNormalizer, adversary: Perturber | None = None,
            seed: int = 0) -> Trajectory:
    """One episode of the observation-attacked loop; clean when ``adversary`` is None."""
    return rollout_batch(policy, env, normalizer, [seed], adversary)[0]


def rollout_batch(policy, env: Env | str, normalizer: ObsNormalizer, seeds: Sequence[int],
                  adversary: Perturber | None = None, attack_seed: int | None = None) -> list[Trajectory]:
    """Run one episode per seed in lock-step so policy and attack calls are batched.

    Each step: normalise the clean state, optionally perturb the normalised
    observation, act on it, advance the environment. With a deterministic
    row-wise policy and adversary, a seed's episode does not depend on which
    other seeds share the batch. A random adversary draws from one stream for
    the whole batch, so its draws depend on the batch composition.
    """
    name = env if isinstance(env, str) else env.name
    envs = [make_env(name) for _ in seeds]
    trajs = [Trajectory() for _ in seeds]
    obs = [e.reset(seed=int(s)) for e, s in zip(envs, seeds)]
    rng = np.random.default_rng(attack_seed if attack_seed is not None else list(map(int, seeds)))
    live = list(range(len(seeds)))
    while live:
        batch = normalizer(np.stack([obs[i] for i in live]))
        if adversary is not None:
            batch = adversary(batch, rng)
        actions = np.atleast_1d(policy.act(batch))
        still = []
        for j, i in enumerate(live):
            a = int(actions[j])
            t = trajs[i]
            t.states.append(obs[i])
            t.observations.append(batch[j].copy())
            t.actions.append(a)
            obs[i], r, done = envs[i].step(a)
            t.rewards.append(r)
            if not done:
                still.append(i)
        live = still
    return trajs
