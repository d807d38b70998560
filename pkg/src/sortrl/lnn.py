"""SortNet score network with l_inf 1-Lipschitz guarantees.

Each unit computes ``w · sort_desc(|x + b_k|)`` with the fixed geometric
weights ``w_i = (1 - rho) * rho**(i - 1)``. Intermediate layers are
mean-centred (batch mean while training, frozen running mean in evaluation),
and the scores are ``-(x_M + b_out)``. A learnable scale ``mu`` exists only
for the cross-entropy term of the distillation loss.
"""
from __future__ import annotations

import contextlib
import enum
import math
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .numerics import ParamStore, ShapeError, Tensor


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"


class Forward(str, enum.Enum):
    EXACT = "exact"
    STOCHASTIC = "stochastic"


class DomainError(ValueError):
    pass


@dataclass
class SortNetConfig:
    """Architecture and training-time knobs of a SortNet policy.

    ``widths`` are the hidden widths; a final SortNet layer of width
    ``n_actions`` produces the scores, so the network has ``len(widths) + 1``
    layers.
    """

    input_dim: int
    n_actions: int
    widths: tuple[int, ...] = (640, 640, 640, 640)
    rho: float = 0.3
    forward: Forward = Forward.EXACT
    p_start: float = 8.0
    p_end: float = 1e3
    p_ramp: float = 0.5
    momentum: float = 0.99

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.forward = Forward(self.forward)
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.input_dim < 1 or self.n_actions < 1 or any(w < 1 for w in self.widths):
            raise ValueError("all widths must be >= 1")
        if not 1.0 <= self.p_start <= self.p_end:
            raise ValueError("need 1 <= p_start <= p_end")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if not 0.0 < self.p_ramp <= 1.0:
            raise ValueError("p_ramp must lie in (0, 1]")

    @property
    def layer_widths(self) -> tuple[int, ...]:
        return self.widths + (self.n_actions,)

    @property
    def n_layers(self) -> int:
        return len(self.widths) + 1

    def fan_in(self, layer: int) -> int:
        return self.input_dim if layer == 0 else self.layer_widths[layer - 1]

    def p_at(self, step: int, total: int) -> float:
        """Smoothing exponent: geometric ramp p_start -> p_end over the first ``p_ramp`` of training."""
        if total <= 0:
            return self.p_end
        frac = min(1.0, step / (self.p_ramp * total))
        return self.p_start * (self.p_end / self.p_start) ** frac


def sortnet_weights(d: int, rho: float) -> np.ndarray:
    return (1.0 - rho) * rho ** np.arange(d, dtype=np.float64)


@dataclass
class NormState:
    running: list[np.ndarray]
    momentum: float
    mode: Mode = Mode.TRAIN
    initialized: bool = False
    last_batch: list[np.ndarray | None] = field(default_factory=list)


@dataclass(frozen=True)
class Margin:
    value: float
    best: int
    runner_up: int

    @property
    def radius_bound(self) -> float:
        return 0.5 * self.value


class SortNetPolicy:
    def __init__(self, config: SortNetConfig, seed: int = 0, init: str = "gaussian"):
        self.config = config
        self.params = ParamStore()
        rng = np.random.default_rng(seed)
        for layer in range(config.n_layers):
            shape = (config.layer_widths[layer], config.fan_in(layer))
            bias = rng.standard_normal(shape) if init == "gaussian" else np.zeros(shape)
            self.params.add(f"layer{layer}.bias", bias)
        self.params.add("out.bias", np.zeros(config.n_actions))
        self.params.add("mu", np.ones(1))
        self.weights = [sortnet_weights(config.fan_in(l), config.rho) for l in range(config.n_layers)]
        self.norm = NormState(
            running=[np.zeros(w) for w in config.widths],
            momentum=config.momentum,
            last_batch=[None] * len(config.widths),
        )
        self.forward_mode = config.forward
        self.p = config.p_start
        self._noise = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))

    # -- modes -------------------------------------------------------------
    @property
    def mode(self) -> Mode:
        return self.norm.mode

    def set_mode(self, mode: Mode | str) -> None:
        self.norm.mode = Mode(mode)

    def set_forward(self, forward: Forward | str) -> None:
        self.forward_mode = Forward(forward)

    def reseed_noise(self, seed: int) -> None:
        self._noise = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))

    @property
    def mu(self) -> Tensor:
        return self.params["mu"]

    # -- forward -----------------------------------------------------------
    def _unit_outputs(self, x: Tensor, layer: int) -> Tensor:
        b = self.params[f"layer{layer}.bias"]
        w = self.weights[layer]
        if self.forward_mode is Forward.EXACT:
            return nx.sortnet_contract(x, b, w)
        d_out, d_in = b.shape
        pre = nx.add(nx.reshape(x, (x.shape[0], 1, d_in)), nx.reshape(b, (1, d_out, d_in)))
        mask = (self._noise.random((x.shape[0], d_out, d_in)) < 1.0 - self.config.rho).astype(np.float64)
        return nx.pnorm_last(nx.mul(nx.abs_elem(pre), mask), self.p)

    def layer_forward(self, x, layer: int, normalize: bool = True) -> Tensor:
        """Output of SortNet layer ``layer`` (0-based) for a batch ``x`` of shape (n, fan_in)."""
        x = nx.as_tensor(x)
        if x.data.ndim != 2 or x.shape[1] != self.config.fan_in(layer):
            raise ShapeError(f"layer {layer} expects width {self.config.fan_in(layer)}, got {x.shape}")
        out = self._unit_outputs(x, layer)
        if not normalize or layer == self.config.n_layers - 1:
            return out
        if self.norm.mode is Mode.TRAIN:
            batch_mean = out.data.mean(axis=0)
            self.norm.last_batch[layer] = batch_mean
            if not self.norm.initialized:
                self.norm.running[layer] = batch_mean.copy()
            else:
                m = self.norm.momentum
                self.norm.running[layer] = m * self.norm.running[layer] + (1.0 - m) * batch_mean
            if layer == self.config.n_layers - 2:
                self.norm.initialized = True
            return nx.sub(out, nx.mean(out, axis=0, keepdims=True))
        return nx.sub(out, self.norm.running[layer])

    def forward(self, states) -> Tensor:
        """Differentiable scores ``g(s)`` for a batch of states, shape (n, n_actions)."""
        x = nx.as_tensor(states)
        if x.data.ndim == 1:
            x = nx.reshape(x, (1, -1))
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError(f"expected state dim {self.config.input_dim}, got {x.shape[-1]}")
        for layer in range(self.config.n_layers):
            x = self.layer_forward(x, layer)
        return nx.neg(nx.add(x, self.params["out.bias"]))

    def scores(self, states) -> np.ndarray:
        """Raw scores without gradient tracking; a single state gives a 1-D array."""
        s = np.asarray(states, dtype=np.float64)
        single = s.ndim == 1
        x = Tensor(s.reshape(1, -1) if single else s)
        if x.shape[-1] != self.config.input_dim:
            raise ShapeError(f"expected state dim {self.config.input_dim}, got {x.shape[-1]}")
        with self.frozen():
            z = self.forward(x).data
        return z[0] if single else z

    @contextlib.contextmanager
    def frozen(self):
        """Stop tracking parameter gradients (input gradients still flow)."""
        saved = [p.requires_grad for _, p in self.params.items()]
        for _, p in self.params.items():
            p.requires_grad = False
        try:
            yield self
        finally:
            for (_, p), r in zip(self.params.items(), saved):
                p.requires_grad = r

    def act(self, states):
        return argmax_lowest(self.scores(states))

    def margin(self, state) -> Margin:
        return margin_of(self.scores(np.asarray(state, dtype=np.float64).reshape(-1)))

    def margins(self, states) -> np.ndarray:
        return margin_values(self.scores(np.atleast_2d(states)))

    # -- persistence -------------------------------------------------------
    def state_arrays(self):
        c = self.config
        header = [float(c.n_layers), *map(float, c.layer_widths), c.rho, float(c.input_dim),
                  float(c.n_actions), c.momentum]
        arrays = {"config": np.array(header)}
        arrays.update(self.params.arrays())
        for l, rm in enumerate(self.norm.running):
            arrays[f"norm.mean{l}"] = rm
        return arrays

    def save(self, path) -> None:
        nx.checkpoint.save(path, self.state_arrays())

    @classmethod
    def from_arrays(cls, arrays, **overrides) -> "SortNetPolicy":
        header = arrays["config"]
        n_layers = int(header[0])
        widths = tuple(int(v) for v in header[1:1 + n_layers])
        rho, input_dim, n_actions, momentum = header[1 + n_layers:5 + n_layers]
        config = SortNetConfig(
            input_dim=int(input_dim), n_actions=int(n_actions), widths=widths[:-1],
            rho=float(rho), momentum=float(momentum), **overrides,
        )
        policy = cls(config, init="zeros")
        policy.params.load_arrays({k: v for k, v in arrays.items() if k in policy.params})
        policy.norm.running = [np.array(arrays[f"norm.mean{l}"]) for l in range(len(config.widths))]
        policy.norm.initialized = True
        policy.set_mode(Mode.EVAL)
        return policy

    @classmethod
    def load(cls, path, **overrides) -> "SortNetPolicy":
        return cls.from_arrays(nx.checkpoint.load(path), **overrides)


# ---------------------------------------------------------------------------
# score-level helpers shared by every policy type
# ---------------------------------------------------------------------------

def argmax_lowest(z):
    """Argmax along the last axis; ties go to the lowest index."""
    z = np.asarray(z)
    a = np.argmax(z, axis=-1)
    return int(a) if z.ndim == 1 else a


def top_two(z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Best index, runner-up index and margin for each row of ``z``."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[-1] < 2:
        raise DomainError("margin needs at least two actions")
    best = np.argmax(z, axis=-1)
    rest = z.copy()
    np.put_along_axis(rest, best[:, None], -np.inf, axis=-1)
    runner = np.argmax(rest, axis=-1)
    value = np.take_along_axis(z, best[:, None], -1)[:, 0] - np.take_along_axis(z, runner[:, None], -1)[:, 0]
    return best, runner, value


def margin_of(z) -> Margin:
    best, runner, value = top_two(np.asarray(z).reshape(1, -1))
    return Margin(float(value[0]), int(best[0]), int(runner[0]))


def margin_values(z) -> np.ndarray:
    return top_two(z)[2]


# ---------------------------------------------------------------------------
# Bernoulli estimator of the sorted contraction
# ---------------------------------------------------------------------------

def bernoulli_estimate(x, rho: float, p: float, seed=None, n: int | None = None):
    """``(sum_i (s_i x_i)**p)**(1/p)`` with ``s_i ~ Bernoulli(1 - rho)``.

    Its expectation tends to ``w · sort_desc(x)`` as ``p`` grows. ``p`` may
    be ``inf`` for the hard maximum. Returns a float, or ``n`` draws.
    """
    x = np.asarray(x, dtype=np.float64)
    if (x < 0).any():
        raise DomainError("bernoulli_estimate needs a nonnegative input")
    if p < 1:
        raise DomainError("p must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    shape = (1 if n is None else n, x.size)
    y = (rng.random(shape) < 1.0 - rho) * x
    if math.isinf(p):
        est = y.max(axis=-1)
    else:
        m = y.max(axis=-1, keepdims=True)
        safe = np.where(m > 0, m, 1.0)
        est = (m * ((y / safe) ** p).sum(axis=-1, keepdims=True) ** (1.0 / p))[:, 0]
    return float(est[0]) if n is None else est


@dataclass(frozen=True)
class BiasDiagnostic:
    mean: float
    std_err: float
    n_inits: int

    @property
    def z_score(self) -> float:
        return self.mean / self.std_err if self.std_err > 0 else 0.0


def bias_diagnostic(config: SortNetConfig, n_inits: int = 1000, seed: int = 0,
                    init: str = "gaussian") -> BiasDiagnostic:
    """Mean first-layer output on a zero input over fresh bias draws (no centring)."""
    if n_inits < 100:
        raise ValueError("n_inits must be >= 100")
    rng = np.random.default_rng(seed)
    d_out, d_in = config.layer_widths[0], config.input_dim
    w = sortnet_weights(d_in, config.rho)
    per_init = np.empty(n_inits)
    x0 = np.zeros((1, d_in))
    for i in range(n_inits):
        b = rng.standard_normal((d_out, d_in)) if init == "gaussian" else np.zeros((d_out, d_in))
        per_init[i] = nx.sortnet_contract(Tensor(x0), Tensor(b), w).data.mean()
    se = per_init.std(ddof=1) / math.sqrt(n_inits)
    return BiasDiagnostic(float(per_init.mean()), float(se), n_inits)
