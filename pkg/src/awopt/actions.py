"""Mixed continuous/discrete actions, actor distribution heads and the actor loss.

Batched arrays are used throughout: continuous parts are ``(..., n_cont)``
float arrays and discrete parts ``(..., n_disc)`` integer arrays.  A single
action is just the unbatched case.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError

VARIANCE_FLOOR = 1e-4
LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class ContinuousSubaction:
    name: str
    low: float
    high: float
    weight: float = 1.0


@dataclass(frozen=True)
class DiscreteSubaction:
    name: str
    cardinality: int
    weight: float = 1.0


@dataclass(frozen=True)
class ActionSpec:
    continuous: tuple[ContinuousSubaction, ...] = ()
    discrete: tuple[DiscreteSubaction, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "continuous", tuple(self.continuous))
        object.__setattr__(self, "discrete", tuple(self.discrete))
        if not self.continuous and not self.discrete:
            raise ValueError("an action spec needs at least one subaction")
        for c in self.continuous:
            if not (np.isfinite(c.low) and np.isfinite(c.high) and c.low < c.high):
                raise ValueError(f"bad bounds for {c.name}: [{c.low}, {c.high}]")
            if c.weight <= 0:
                raise ValueError(f"loss weight for {c.name} must be positive")
        for d in self.discrete:
            if d.cardinality < 1:
                raise ValueError(f"cardinality for {d.name} must be >= 1")
            if d.weight <= 0:
                raise ValueError(f"loss weight for {d.name} must be positive")

    @property
    def n_cont(self) -> int:
        return len(self.continuous)

    @property
    def n_disc(self) -> int:
        return len(self.discrete)

    @property
    def low(self) -> np.ndarray:
        return np.array([c.low for c in self.continuous], dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.array([c.high for c in self.continuous], dtype=np.float64)

    @property
    def cont_weights(self) -> np.ndarray:
        return np.array([c.weight for c in self.continuous], dtype=np.float64)

    @property
    def cardinalities(self) -> tuple[int, ...]:
        return tuple(d.cardinality for d in self.discrete)

    @property
    def encoded_dim(self) -> int:
        """Width of the critic's action input: raw continuous values plus one-hots."""
        return self.n_cont + sum(self.cardinalities)

    @property
    def head_dim(self) -> int:
        """Width of the actor's output: mean and variance per continuous dim plus logits."""
        return 2 * self.n_cont + sum(self.cardinalities)

    def index(self, name: str) -> tuple[str, int]:
        for i, c in enumerate(self.continuous):
            if c.name == name:
                return "continuous", i
        for i, d in enumerate(self.discrete):
            if d.name == name:
                return "discrete", i
        raise KeyError(name)

    def encode(self, cont, disc) -> np.ndarray:
        """Flatten actions for the critic input. Works on batches."""
        cont = np.asarray(cont, dtype=np.float64)
        disc = np.asarray(disc, dtype=np.int64)
        batch_shape = cont.shape[:-1] if self.n_cont else disc.shape[:-1]
        parts = [cont.reshape(batch_shape + (self.n_cont,))]
        for j, card in enumerate(self.cardinalities):
            parts.append(np.eye(card)[disc[..., j]])
        return np.concatenate(parts, axis=-1)

    def to_dict(self) -> dict:
        return {
            "continuous": [
                {"name": c.name, "low": c.low, "high": c.high, "weight": c.weight} for c in self.continuous
            ],
            "discrete": [
                {"name": d.name, "cardinality": d.cardinality, "weight": d.weight} for d in self.discrete
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ActionSpec":
        return cls(
            tuple(ContinuousSubaction(**c) for c in d.get("continuous", [])),
            tuple(DiscreteSubaction(**x) for x in d.get("discrete", [])),
        )


@dataclass
class MixedAction:
    continuous: np.ndarray = field(default_factory=lambda: np.zeros(0))
    discrete: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.continuous = np.asarray(self.continuous, dtype=np.float64).reshape(-1)
        self.discrete = np.asarray(self.discrete, dtype=np.int64).reshape(-1)

    def validate(self, spec: ActionSpec) -> None:
        if self.continuous.shape != (spec.n_cont,) or self.discrete.shape != (spec.n_disc,):
            raise ShapeError("action does not match spec dimensions")
        if np.any(self.continuous < spec.low) or np.any(self.continuous > spec.high):
            raise ValueError("continuous action outside bounds")
        if np.any(self.discrete < 0) or np.any(self.discrete >= np.array(spec.cardinalities, dtype=np.int64)):
            raise ValueError("discrete index outside cardinality")

    def to_dict(self) -> dict:
        return {"continuous": self.continuous.tolist(), "discrete": self.discrete.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MixedAction":
        return cls(d["continuous"], d["discrete"])


@dataclass
class ActorDistribution:
    """Gaussian per continuous subaction, categorical per discrete subaction.

    Arrays may carry leading batch dimensions.
    """

    mean: np.ndarray
    variance: np.ndarray
    probs: list[np.ndarray]

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.variance = np.asarray(self.variance, dtype=np.float64)
        self.probs = [np.asarray(p, dtype=np.float64) for p in self.probs]
        if self.mean.shape != self.variance.shape:
            raise ShapeError("mean and variance shapes differ")
        if np.any(self.variance <= 0):
            raise ValueError("variances must be positive")
        for p in self.probs:
            if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-9):
                raise ValueError("probability vectors must be nonnegative and sum to 1")

    def mode(self, spec: ActionSpec) -> tuple[np.ndarray, np.ndarray]:
        cont = np.clip(self.mean, spec.low, spec.high)
        disc = np.stack([p.argmax(axis=-1) for p in self.probs], axis=-1) if self.probs else \
            np.zeros(self.mean.shape[:-1] + (0,), dtype=np.int64)
        return cont, disc


@dataclass
class DistGrad:
    mean: np.ndarray
    variance: np.ndarray
    probs: list[np.ndarray]


def _softplus(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(x):
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_to_distribution(spec: ActionSpec, raw: np.ndarray) -> ActorDistribution:
    """Turn raw actor outputs ``[means | variance pre-activations | logits...]`` into a distribution."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != spec.head_dim:
        raise ShapeError(f"head width {raw.shape[-1]} != {spec.head_dim}")
    c = spec.n_cont
    mean = raw[..., :c]
    var = _softplus(raw[..., c:2 * c]) + VARIANCE_FLOOR
    probs, off = [], 2 * c
    for card in spec.cardinalities:
        probs.append(_softmax(raw[..., off:off + card]))
        off += card
    return ActorDistribution(mean, var, probs)


def head_backward(spec: ActionSpec, raw: np.ndarray, dist: ActorDistribution, grad: DistGrad) -> np.ndarray:
    """Chain a gradient w.r.t. distribution parameters back to the raw head outputs."""
    c = spec.n_cont
    out = np.zeros_like(np.asarray(raw, dtype=np.float64))
    out[..., :c] = grad.mean
    out[..., c:2 * c] = grad.variance * _sigmoid(raw[..., c:2 * c])
    off = 2 * c
    for p, g in zip(dist.probs, grad.probs):
        card = p.shape[-1]
        out[..., off:off + card] = p * (g - (p * g).sum(axis=-1, keepdims=True))
        off += card
    return out


def sample(dist: ActorDistribution, spec: ActionSpec, rng: np.random.Generator) -> MixedAction:
    cont, disc = sample_arrays(dist, spec, rng)
    return MixedAction(cont, disc)


def sample_arrays(dist: ActorDistribution, spec: ActionSpec, rng: np.random.Generator):
    """Batched sampling; returns ``(continuous, discrete)`` arrays."""
    noise = rng.standard_normal(dist.mean.shape)
    cont = np.clip(dist.mean + np.sqrt(dist.variance) * noise, spec.low, spec.high)
    disc = [_categorical(p, rng) for p in dist.probs]
    batch = dist.mean.shape[:-1]
    disc = np.stack(disc, axis=-1) if disc else np.zeros(batch + (0,), dtype=np.int64)
    return cont, disc


def _categorical(p: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(p.shape[:-1] + (1,))
    cdf = np.cumsum(p, axis=-1)
    idx = (u > cdf).sum(axis=-1)
    return np.minimum(idx, p.shape[-1] - 1).astype(np.int64)


def uniform_random_action(spec: ActionSpec, rng: np.random.Generator) -> MixedAction:
    cont = rng.uniform(spec.low, spec.high) if spec.n_cont else np.zeros(0)
    cont = np.clip(cont, spec.low, spec.high)
    disc = np.array([rng.integers(card) for card in spec.cardinalities], dtype=np.int64)
    return MixedAction(cont, disc)


def actor_loss_arrays(spec: ActionSpec, target_cont, target_disc, dist: ActorDistribution):
    """Weighted per-subaction loss, batched over leading dims.

    ``sum_k w_k (a_k - mean_k)^2 + sum_j w_j * cross_entropy(a_j, probs_j)``.
    Returns per-sample losses and the gradient w.r.t. the distribution
    parameters (the variance gradient is identically zero).
    """
    target_cont = np.asarray(target_cont, dtype=np.float64)
    target_disc = np.asarray(target_disc, dtype=np.int64)
    diff = dist.mean - target_cont
    w = spec.cont_weights
    loss = (w * diff * diff).sum(axis=-1) if spec.n_cont else np.zeros(dist.mean.shape[:-1])
    g_mean = 2.0 * w * diff
    g_probs = []
    for j, (sub, p) in enumerate(zip(spec.discrete, dist.probs)):
        idx = target_disc[..., j]
        p_t = np.take_along_axis(p, idx[..., None], axis=-1)[..., 0]
        clamped = np.maximum(p_t, LOG_CLAMP)
        loss = loss - sub.weight * np.log(clamped)
        g = np.zeros_like(p)
        np.put_along_axis(g, idx[..., None], (-sub.weight / clamped)[..., None], axis=-1)
        g_probs.append(g)
    return loss, DistGrad(g_mean, np.zeros_like(dist.variance), g_probs)


def actor_loss(spec: ActionSpec, target: MixedAction, dist: ActorDistribution) -> tuple[float, DistGrad]:
    loss, grad = actor_loss_arrays(spec, target.continuous, target.discrete, dist)
    return float(loss), grad


def variance_nll(spec: ActionSpec, target_cont, dist: ActorDistribution):
    """Gaussian negative log-likelihood of the targets, with the mean held fixed.

    Only the variance receives gradient; this calibrates the exploration
    spread of the actor without changing what the mean regresses to.
    """
    diff2 = (np.asarray(target_cont, dtype=np.float64) - dist.mean) ** 2
    var = dist.variance
    loss = 0.5 * (np.log(var) + diff2 / var).sum(axis=-1)
    g_var = 0.5 * (1.0 / var - diff2 / (var * var))
    return loss, g_var
