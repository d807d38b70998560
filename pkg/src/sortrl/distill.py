"""Distilling a teacher's greedy actions into a SortNet student.

The objective per mini-batch is ``lam * mean(CE(mu * z, a*)) + mean(hinge(z, theta, a*))``
where the hinge pushes correct decisions towards a margin of ``theta`` on the
raw scores ``z`` and ignores wrong or already-saturated decisions.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .lnn import Forward, Mode, SortNetConfig, SortNetPolicy, top_two
from .numerics import AdamWState, Tensor
from .teacher import ExpertDataset

log = logging.getLogger(__name__)


class UsageError(RuntimeError):
    pass


class DomainError(ValueError):
    pass


def _check_labels(z: Tensor, a) -> np.ndarray:
    a = np.asarray(a, dtype=np.int64)
    n_actions = z.shape[-1]
    if a.size and (a.min() < 0 or a.max() >= n_actions):
        raise DomainError(f"action id out of range for {n_actions} actions")
    return a


def ce_loss(z, a_star, mu=1.0) -> Tensor:
    """``log_sum_exp(mu * z) - mu * z[a*]`` per row (scalar for a single score vector)."""
    z = nx.as_tensor(z)
    a = _check_labels(z, a_star)
    scaled = nx.mul(z, mu)
    return nx.sub(nx.log_sum_exp(scaled), nx.pick(scaled, a))


def rob_branch(z: np.ndarray, theta: float, y) -> tuple[np.ndarray, np.ndarray]:
    """Active-hinge mask and the index of the strongest competitor of ``y``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    y = np.atleast_1d(np.asarray(y, dtype=np.int64))
    others = z.copy()
    np.put_along_axis(others, y[:, None], -np.inf, axis=-1)
    rival = np.argmax(others, axis=-1)
    z_y = np.take_along_axis(z, y[:, None], -1)[:, 0]
    z_r = np.take_along_axis(z, rival[:, None], -1)[:, 0]
    active = (z_y >= z.max(axis=-1)) & (z_y - z_r <= theta)
    return active, rival


def rob_loss(z, theta: float, y) -> Tensor:
    """Hinge on the margin of the teacher action; zero when it is not the top score or the margin exceeds theta."""
    if theta <= 0:
        raise DomainError("theta must be positive")
    z = nx.as_tensor(z)
    y_arr = _check_labels(z, y)
    single = z.data.ndim == 1
    z2 = nx.reshape(z, (1, -1)) if single else z
    y2 = np.atleast_1d(y_arr)
    active, rival = rob_branch(z2.data, theta, y2)
    gap = nx.sub(nx.pick(z2, rival), nx.pick(z2, y2))
    out = nx.mul(gap, active.astype(np.float64))
    return nx.reshape(out, ()) if single else out


def total_loss(policy: SortNetPolicy, states, actions, lam: float, theta: float):
    """Composite loss over one batch; returns (loss, scores array)."""
    states = np.asarray(states)
    if len(states) == 0:
        raise UsageError("empty batch")
    z = policy.forward(states)
    ce = ce_loss(z, actions, policy.mu)
    rob = rob_loss(z, theta, actions)
    loss = nx.add(nx.mul(nx.mean(ce), lam), nx.mean(rob))
    return loss, z.data, float(ce.data.mean()), float(rob.data.mean())


def lambda_at(t: int, n_iter: int, lam0: float = 1.0, lam_final: float = 0.1) -> float:
    """Geometric decay from ``lam0`` at t=0 to ``lam_final`` at t=n_iter."""
    if n_iter <= 0:
        return lam_final
    t = min(max(t, 0), n_iter)
    if lam_final == lam0:
        return lam0
    if lam_final <= 0 or lam0 <= 0:
        # geometric interpolation needs positive endpoints; fall back to linear
        return lam0 + (lam_final - lam0) * t / n_iter
    return lam0 * (lam_final / lam0) ** (t / n_iter)


@dataclass
class DistillConfig:
    epsilon: float = 0.1
    theta: float | None = None
    lam0: float = 1.0
    lam_final: float = 0.1
    n_iter: int = 20_000
    batch_size: int = 512
    lr: float = 0.02
    weight_decay: float = 0.02
    widths: tuple = (640, 640, 640, 640)
    rho: float = 0.3
    forward: str = "exact"
    momentum: float = 0.99
    early_stop_patience: int | None = None
    early_stop_tol: float = 1e-3
    log_every: int = 1
    checkpoint_every: int | None = None

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.theta is None:
            self.theta = 2.0 * self.epsilon
        if self.theta <= 0:
            raise ValueError("theta must be positive")
        if self.n_iter < 1 or self.batch_size < 1:
            raise ValueError("n_iter and batch_size must be >= 1")

    def network(self, input_dim: int, n_actions: int) -> SortNetConfig:
        return SortNetConfig(input_dim=input_dim, n_actions=n_actions, widths=self.widths, rho=self.rho,
                             forward=self.forward, momentum=self.momentum)


@dataclass
class TrainRecord:
    iteration: int
    ce: float
    rob: float
    lam: float
    p: float
    margin_frac: float
    agree_rate: float


TRAINLOG_FIELDS = ["iteration", "ce", "rob", "lambda", "p", "margin_frac", "agree_rate"]


@dataclass
class TrainLog:
    records: list[TrainRecord] = field(default_factory=list)

    def append(self, rec: TrainRecord) -> None:
        self.records.append(rec)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRAINLOG_FIELDS)
            for r in self.records:
                w.writerow([r.iteration, repr(r.ce), repr(r.rob), repr(r.lam), repr(r.p),
                            repr(r.margin_frac), repr(r.agree_rate)])


def distill_train(dataset: ExpertDataset, config: DistillConfig | None = None, seed: int = 0,
                  policy: SortNetPolicy | None = None, checkpoint_dir=None, progress=None):
    """Train a SortNet student on ``dataset``; returns (policy in Eval/Exact mode, TrainLog).

    ``n_iter`` counts optimizer steps over reshuffled mini-batches.
    """
    config = config or DistillConfig()
    if len(dataset) == 0:
        raise UsageError("cannot distill from an empty dataset")
    if policy is None:
        policy = SortNetPolicy(config.network(dataset.obs_dim, dataset.n_actions), seed=seed)
    policy.set_mode(Mode.TRAIN)
    policy.set_forward(config.forward)
    policy.reseed_noise(seed)
    opt = AdamWState(lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    n = len(dataset)
    bs = min(config.batch_size, n)
    order = rng.permutation(n)
    cursor = 0
    logbook = TrainLog()
    best_agree, stale = -1.0, 0
    for it in range(config.n_iter):
        if cursor + bs > n:
            order, cursor = rng.permutation(n), 0
        idx = order[cursor:cursor + bs]
        cursor += bs
        lam = lambda_at(it, config.n_iter, config.lam0, config.lam_final)
        policy.p = policy.config.p_at(it, config.n_iter)
        loss, z, ce, rob = total_loss(policy, dataset.states[idx], dataset.actions[idx], lam, config.theta)
        loss.backward()
        nx.adamw_step(policy.params, opt, allow_missing=True)

        y = dataset.actions[idx]
        best, _, margin = top_two(z)
        agree = float((best == y).mean())
        if it % config.log_every == 0 or it == config.n_iter - 1:
            rec = TrainRecord(it, ce, rob, lam, policy.p, float((margin >= config.theta).mean()), agree)
            logbook.append(rec)
            if progress:
                progress(rec)
        if checkpoint_dir is not None and config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            policy.save(Path(checkpoint_dir) / f"student_{it + 1:06d}.bin")
        if config.early_stop_patience:
            if agree > best_agree + config.early_stop_tol:
                best_agree, stale = agree, 0
            else:
                stale += 1
                if stale >= config.early_stop_patience:
                    log.info("early stop at iteration %d (agreement plateau %.4f)", it, best_agree)
                    break
    policy.set_mode(Mode.EVAL)
    policy.set_forward(Forward.EXACT)
    return policy, logbook
