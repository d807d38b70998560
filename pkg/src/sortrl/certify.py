"""Margin certificates, action certification rate and empirical audits.

For a score map that is 1-Lipschitz in l_inf, no perturbation smaller than
half the top-two score gap can change the argmax. Certificates are only
issued for a SortNet policy in Eval mode with the exact forward pass.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .envs import ObsNormalizer, rollout_batch
from .lnn import Forward, Mode, argmax_lowest
from .report import _write, read_csv


class UsageError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


def _require_certifiable(policy) -> None:
    if getattr(policy, "mode", None) is not Mode.EVAL or getattr(policy, "forward_mode", None) is not Forward.EXACT:
        raise UsageError("certificates require a SortNet policy in Eval mode with the exact forward pass")


@dataclass(frozen=True)
class Certificate:
    state: np.ndarray
    margin: float
    epsilon: float

    @property
    def radius_lb(self) -> float:
        return self.margin / 2.0

    @property
    def certified(self) -> bool:
        return self.margin >= 2.0 * self.epsilon


def certify_state(policy, s, epsilon: float) -> Certificate:
    _require_certifiable(policy)
    s = np.asarray(s, dtype=np.float64)
    return Certificate(s, policy.margin(s).value, float(epsilon))


@dataclass(frozen=True)
class AcrReport:
    epsilon: float
    n_states: int
    n_certified: int

    @property
    def acr(self) -> float:
        return self.n_certified / self.n_states


def acr_from_margins(margins, epsilon: float) -> AcrReport:
    m = np.asarray(margins, dtype=np.float64)
    if m.size == 0:
        raise DomainError("ACR needs at least one state")
    return AcrReport(float(epsilon), int(m.size), int((m >= 2.0 * epsilon).sum()))


def rollout_margins(policy, env_name: str, normalizer: ObsNormalizer, episodes: int = 20, seed: int = 0):
    """Margins of every state visited by clean rollouts (plus the observations themselves)."""
    _require_certifiable(policy)
    seeds = [int(v) for v in np.random.SeedSequence([seed, 23]).generate_state(episodes)]
    trajs = rollout_batch(policy, env_name, normalizer, seeds)
    obs = np.concatenate([np.asarray(t.observations) for t in trajs]) if trajs else np.zeros((0, 1))
    return policy.margins(obs) if len(obs) else np.zeros(0), obs


def acr(policy, env_name: str, normalizer: ObsNormalizer, epsilon: float, episodes: int = 20,
        seed: int = 0) -> AcrReport:
    margins, _ = rollout_margins(policy, env_name, normalizer, episodes, seed)
    return acr_from_margins(margins, epsilon)


CERT_FIELDS = ["state_index", "margin", "radius_lb", "certified"]
ACR_FIELDS = ["eps", "n_states", "n_certified", "acr"]


def write_certificates(path, margins, epsilon: float) -> None:
    m = np.asarray(margins, dtype=np.float64)
    _write(path, CERT_FIELDS, ([i, float(v), float(v) / 2.0, int(v >= 2.0 * epsilon)] for i, v in enumerate(m)),
           "certify")


def write_acr(path, reports: Sequence[AcrReport]) -> None:
    _write(path, ACR_FIELDS, ([float(r.epsilon), r.n_states, r.n_certified, float(r.acr)] for r in reports), "acr")


def read_margins(path) -> np.ndarray:
    return np.array([float(row["margin"]) for row in read_csv(path)])


# ---------------------------------------------------------------------------
# audits
# ---------------------------------------------------------------------------

def lipschitz_audit(model, low, high, n_pairs: int = 100_000, seed: int = 0, batch: int = 5000) -> float:
    """Largest observed ||g(s1) - g(s2)||_inf / ||s1 - s2||_inf over random pairs.

    Half the pairs are drawn independently in the box; the other half place
    the second point at a random l_inf distance between 1e-4 and 1 of the
    first, where the ratio is usually closest to the bound.
    """
    rng = np.random.default_rng(seed)
    low, high = np.asarray(low, dtype=np.float64), np.asarray(high, dtype=np.float64)
    worst = 0.0
    done = 0
    while done < n_pairs:
        n = min(batch, n_pairs - done)
        s1 = rng.uniform(low, high, size=(n, low.size))
        s2 = rng.uniform(low, high, size=(n, low.size))
        near = n // 2
        scale = 10.0 ** rng.uniform(-4, 0, size=(near, 1))
        s2[:near] = s1[:near] + scale * rng.uniform(-1, 1, size=(near, low.size))
        z1, z2 = model.scores(s1), model.scores(s2)
        num = np.abs(z1 - z2).max(axis=1)
        den = np.abs(s1 - s2).max(axis=1)
        ok = den > 0
        if ok.any():
            worst = max(worst, float((num[ok] / den[ok]).max()))
        done += n
    return worst


def brute_force_radius(model, s, resolution: float = 0.01, max_r: float = 2.0, n_dirs: int = 256,
                       seed: int = 0) -> float:
    """Smallest l_inf distance at which a searched perturbation flips the action.

    Directions on the l_inf unit sphere (all corners for low dimension,
    random boundary points otherwise, plus the input-gradient sign) are
    probed at geometrically growing radii; the first flipping radius is then
    refined by bisection along its flipping directions. The result is an
    upper bound on the true robust radius, or ``max_r`` if nothing flips.
    """
    s = np.asarray(s, dtype=np.float64).reshape(-1)
    d = s.size
    rng = np.random.default_rng(seed)
    a0 = argmax_lowest(model.scores(s))
    dirs = [_corners(d)] if d <= 8 else []
    rand = rng.uniform(-1, 1, size=(n_dirs, d))
    face = rng.integers(0, d, size=n_dirs)
    rand[np.arange(n_dirs), face] = np.sign(rng.uniform(-1, 1, size=n_dirs))
    dirs.append(rand)
    try:
        from .adversary import input_gradient
        g = input_gradient(model, s[None], np.array([a0]))
        gs = np.sign(g)
        if np.any(gs != 0):
            dirs.append(gs)
    except (AttributeError, TypeError):
        pass
    dirs = np.concatenate(dirs)

    def flips(r: float, dset: np.ndarray) -> np.ndarray:
        acts = np.asarray(argmax_lowest(model.scores(s + r * dset))).reshape(-1)
        return acts != a0

    lo, r = 0.0, resolution
    while True:
        r = min(r, max_r)
        hit = flips(r, dirs)
        if hit.any():
            break
        if r >= max_r:
            return float(max_r)
        lo, r = r, 2.0 * r
    hi = r
    cand = dirs[hit]
    while hi - lo > resolution:
        mid = 0.5 * (lo + hi)
        m = flips(mid, cand)
        if m.any():
            hi, cand = mid, cand[m]
        else:
            lo = mid
    return float(hi)


def _corners(d: int) -> np.ndarray:
    grid = np.array(np.meshgrid(*([[-1.0, 1.0]] * d), indexing="ij")).reshape(d, -1).T
    return grid
