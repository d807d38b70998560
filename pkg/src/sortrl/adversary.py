"""l_inf observation attacks (PGD, RI-FGSM, RI-FGSM-Multi) and epsilon sweeps.

Attacks take any differentiable scorer exposing ``forward`` (Tensor -> scores),
``scores`` and ``frozen()``; both the SortNet student and the DQN teacher
qualify. All attacks operate on batches of normalised observations, one
independent problem per row.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .envs import ObsNormalizer, rollout_batch
from .lnn import Mode, argmax_lowest, margin_values
from .numerics import Tensor


class DomainError(ValueError):
    pass


class Family(str, enum.Enum):
    PGD = "pgd"
    RIFGSM = "rifgsm"
    RIFGSM_MULTI = "rifgsm_multi"


@dataclass
class AttackConfig:
    family: Family = Family.PGD
    epsilon: float = 0.1
    steps: int = 10
    step_size: float | None = None
    restarts: int = 1
    seed: int = 0

    def __post_init__(self):
        self.family = Family(self.family)
        if self.epsilon < 0:
            raise DomainError("epsilon must be nonnegative")
        if self.steps < 1 or self.restarts < 1:
            raise DomainError("steps and restarts must be >= 1")

    @property
    def eta(self) -> float:
        """Step size: eps/10 for PGD, a full-budget step for the FGSM family, unless set."""
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / 10.0 if self.family is Family.PGD else self.epsilon

    def with_epsilon(self, eps: float) -> "AttackConfig":
        # a pinned step size is kept as is; the default rule follows the new budget
        return replace(self, epsilon=eps)


@dataclass
class AttackOutcome:
    perturbed: np.ndarray
    flipped: np.ndarray | bool
    clean_action: np.ndarray | int
    ce_before: np.ndarray | float
    ce_after: np.ndarray | float


def _ce_rows(z: np.ndarray, a: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    lse = (m + np.log(np.exp(z - m).sum(axis=-1, keepdims=True)))[:, 0]
    return lse - z[np.arange(len(a)), a]


def input_gradient(model, states: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Gradient of sum_i CE(g(s_i), target_i) w.r.t. each s_i (rows are independent)."""
    x = Tensor(states, requires_grad=True)
    with model.frozen():
        z = model.forward(x)
        loss = nx.sum_(nx.sub(nx.log_sum_exp(z), nx.pick(z, target)))
        loss.backward()
    return x.grad if x.grad is not None else np.zeros_like(states)


def _project(x: np.ndarray, center: np.ndarray, eps: float) -> np.ndarray:
    """Clip onto the eps-box so that ``|out - center| <= eps`` holds in floating point."""
    out = np.minimum(np.maximum(x, center - eps), center + eps)
    bad = np.abs(out - center) > eps
    while bad.any():
        # center +- eps can round outward; step those coordinates one ulp inward
        out[bad] = np.nextafter(out[bad], center[bad])
        bad = np.abs(out - center) > eps
    return out


def _require_eval(model) -> None:
    if getattr(model, "mode", Mode.EVAL) is not Mode.EVAL:
        raise DomainError("attacks require the policy in Eval mode")


def pgd(model, states, cfg: AttackConfig, init: np.ndarray | None = None) -> np.ndarray:
    """Untargeted l_inf PGD on CE with the clean action fixed as the label.

    K sign-gradient ascent steps of size eta, each projected onto the
    eps-box around the clean state. A row that flips at some iterate keeps
    that first flipping point. ``init`` warm-starts from a given point
    (projected into the box first).
    """
    _require_eval(model)
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if cfg.epsilon == 0:
        return s.copy()
    a_star = np.asarray(argmax_lowest(model.scores(s))).reshape(-1)
    x = s.copy() if init is None else _project(np.atleast_2d(init), s, cfg.epsilon)
    done = argmax_lowest(model.scores(x)) != a_star
    for _ in range(cfg.steps):
        if done.all():
            break
        live = ~done
        g = input_gradient(model, x[live], a_star[live])
        x[live] = _project(x[live] + cfg.eta * np.sign(g), s[live], cfg.epsilon)
        done = done | (np.asarray(argmax_lowest(model.scores(x))).reshape(-1) != a_star)
    return x


def pgd_ladder(model, states, cfg: AttackConfig, eps_list: Sequence[float]) -> list[np.ndarray]:
    """PGD at increasing budgets, each warm-started from the previous solution.

    Returns the flip mask per budget. Since a flipped row stays at its first
    flipping point, the masks are nested: flips at eps are a subset of flips at
    any larger eps.
    """
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise DomainError("eps_list must be nondecreasing")
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    a_star = np.asarray(argmax_lowest(model.scores(s))).reshape(-1)
    x, masks = None, []
    for eps in eps_list:
        x = pgd(model, s, cfg.with_epsilon(float(eps)), init=x)
        masks.append(np.asarray(argmax_lowest(model.scores(x))).reshape(-1) != a_star)
    return masks


def ri_fgsm(model, states, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Random start in the box, one sign step of size eta, project.

    The Multi family repeats with fresh starts and keeps, per row, the first
    sample that changes the action (or the last attempt if none does).
    """
    _require_eval(model)
    s = np.atleast_2d(np.asarray(states, dtype=np.float64))
    if cfg.epsilon == 0:
        return s.copy()
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    a_star = np.asarray(argmax_lowest(model.scores(s))).reshape(-1)
    restarts = cfg.restarts if cfg.family is Family.RIFGSM_MULTI else 1
    out = s.copy()
    done = np.zeros(len(s), dtype=bool)
    for _ in range(restarts):
        live = ~done
        if not live.any():
            break
        x0 = s[live] + rng.uniform(-cfg.epsilon, cfg.epsilon, size=s[live].shape)
        g = input_gradient(model, x0, a_star[live])
        x1 = _project(x0 + cfg.eta * np.sign(g), s[live], cfg.epsilon)
        out[live] = x1
        flipped = np.asarray(argmax_lowest(model.scores(x1))).reshape(-1) != a_star[live]
        idx = np.flatnonzero(live)
        done[idx[flipped]] = True
    return out


def perturb(model, states, cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    if cfg.family is Family.PGD:
        return pgd(model, states, cfg)
    return ri_fgsm(model, states, cfg, rng)


def _outcome(model, s: np.ndarray, adv: np.ndarray) -> AttackOutcome:
    z0, z1 = model.scores(s), model.scores(adv)
    a0 = np.asarray(argmax_lowest(z0)).reshape(-1)
    a1 = np.asarray(argmax_lowest(z1)).reshape(-1)
    return AttackOutcome(adv, a0 != a1, a0, _ce_rows(np.atleast_2d(z0), a0), _ce_rows(np.atleast_2d(z1), a0))


def _squeeze(out: AttackOutcome) -> AttackOutcome:
    return AttackOutcome(out.perturbed[0], bool(out.flipped[0]), int(out.clean_action[0]),
                         float(out.ce_before[0]), float(out.ce_after[0]))


def pgd_attack(model, s, cfg: AttackConfig) -> AttackOutcome:
    s = np.asarray(s, dtype=np.float64)
    s2 = np.atleast_2d(s)
    out = _outcome(model, s2, pgd(model, s2, cfg))
    return _squeeze(out) if s.ndim == 1 else out


def ri_fgsm_attack(model, s, cfg: AttackConfig, rng: np.random.Generator | None = None) -> AttackOutcome:
    s = np.asarray(s, dtype=np.float64)
    s2 = np.atleast_2d(s)
    out = _outcome(model, s2, ri_fgsm(model, s2, cfg, rng))
    return _squeeze(out) if s.ndim == 1 else out


# ---------------------------------------------------------------------------
# attacked evaluation
# ---------------------------------------------------------------------------

@dataclass
class SweepRow:
    env: str
    method: str
    attack: str
    eps: float
    episodes: int
    mean_reward: float
    std_err: float
    flip_rate: float
    mean_margin: float
    returns: list = field(default_factory=list)


def episode_seeds(seed: int, episodes: int) -> list[int]:
    """Environment seeds shared by every method and budget (paired comparison)."""
    return [int(v) for v in np.random.SeedSequence([seed, 17]).generate_state(episodes)]


def std_error(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    return float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0


class _Recorder:
    """Adversary wrapper for rollouts that also tallies flips and clean margins."""

    def __init__(self, model, cfg: AttackConfig):
        self.model, self.cfg = model, cfg
        self.flips = 0
        self.steps = 0
        self.margins: list[np.ndarray] = []

    def __call__(self, batch: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        z = self.model.scores(batch)
        if z.shape[-1] >= 2:
            self.margins.append(margin_values(z))
        adv = perturb(self.model, batch, self.cfg, rng) if self.cfg.epsilon > 0 else batch
        if self.cfg.epsilon > 0:
            self.flips += int((np.asarray(argmax_lowest(self.model.scores(adv))) != argmax_lowest(z)).sum())
        self.steps += len(batch)
        return adv


def attacked_returns(model, env_name: str, normalizer: ObsNormalizer, cfg: AttackConfig,
                     seeds: Sequence[int]):
    rec = _Recorder(model, cfg)
    trajs = rollout_batch(model, env_name, normalizer, list(seeds), adversary=rec, attack_seed=cfg.seed)
    returns = [t.total_return for t in trajs]
    margin = float(np.concatenate(rec.margins).mean()) if rec.margins else float("nan")
    return returns, rec.flips / max(rec.steps, 1), margin


def sweep_epsilon(model, env_name: str, normalizer: ObsNormalizer, eps_list: Sequence[float],
                  episodes: int, cfg: AttackConfig, seed: int = 0, method: str = "sortrl",
                  workers: int = 1) -> list[SweepRow]:
    """Mean attacked episode reward (and standard error) per budget in ``eps_list``."""
    _require_eval(model)
    seeds = episode_seeds(seed, episodes)

    def run(eps: float) -> SweepRow:
        c = cfg.with_epsilon(float(eps))
        returns, flip_rate, margin = attacked_returns(model, env_name, normalizer, c, seeds)
        return SweepRow(env_name, method, c.family.value, float(eps), episodes, float(np.mean(returns)),
                        std_error(returns), flip_rate, margin, returns)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, eps_list))
    return [run(e) for e in eps_list]


def eps_grid(lo: float = 0.0, hi: float = 0.2, step: float = 0.02) -> list[float]:
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]
