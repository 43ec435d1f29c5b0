"""Cross-entropy maximization of a Q-function over mixed actions.

Q-functions passed here are vectorized: ``q(states, cont, disc) -> values``
with ``states`` of shape ``(n, obs_dim)``, ``cont`` ``(n, n_cont)`` and
``disc`` ``(n, n_disc)``.  The batched routine optimizes many states at once,
which is how Bellman targets are computed during training.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .actions import ActionSpec, MixedAction
from .errors import ConfigError, NumericError

QFunction = Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]
CEM_MODES = ("plain", "actor_mean", "actor_candidate")


@dataclass
class CemConfig:
    iterations: int = 3
    population: int = 64
    elite_count: int = 6
    initial_std: Sequence[float] | None = None  # default (high - low) / 4
    mode: str = "plain"
    std_floor: float = 1e-3
    smoothing: float = 1e-3

    def __post_init__(self):
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not 1 <= self.elite_count <= self.population:
            raise ConfigError("need 1 <= elite_count <= population")
        if self.mode not in CEM_MODES:
            raise ConfigError(f"mode must be one of {CEM_MODES}")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations, "population": self.population, "elite_count": self.elite_count,
            "initial_std": None if self.initial_std is None else list(self.initial_std),
            "mode": self.mode, "std_floor": self.std_floor, "smoothing": self.smoothing,
        }


@dataclass
class CemResult:
    cont: np.ndarray          # (B, n_cont)
    disc: np.ndarray          # (B, n_disc)
    value: np.ndarray         # (B,)
    history: list[np.ndarray] = field(default_factory=list)  # running best after each iteration


def cem_argmax_batch(
    q: QFunction,
    states: np.ndarray,
    spec: ActionSpec,
    config: CemConfig,
    rng: np.random.Generator,
    proposal: tuple[np.ndarray, np.ndarray] | None = None,
) -> CemResult:
    states = np.atleast_2d(np.asarray(states, dtype=np.float64))
    B, P, E = states.shape[0], config.population, config.elite_count
    if (config.mode == "plain") != (proposal is None):
        raise ConfigError("an actor proposal is required exactly when mode != 'plain'")
    low, high = spec.low, spec.high
    c, k = spec.n_cont, spec.n_disc

    mean = np.broadcast_to((low + high) / 2.0, (B, c)).copy()
    std0 = (high - low) / 4.0 if config.initial_std is None else np.asarray(config.initial_std, dtype=np.float64)
    std = np.broadcast_to(std0, (B, c)).copy()
    probs = [np.full((B, card), 1.0 / card) for card in spec.cardinalities]
    if proposal is not None:
        p_cont = np.asarray(proposal[0], dtype=np.float64).reshape(B, c)
        p_disc = np.asarray(proposal[1], dtype=np.int64).reshape(B, k)
        if config.mode == "actor_mean":
            mean = np.clip(p_cont, low, high).copy()

    best_val = np.full(B, -np.inf)
    best_cont = np.zeros((B, c))
    best_disc = np.zeros((B, k), dtype=np.int64)
    history = []
    rows = np.arange(B)[:, None]
    states_rep = None

    for _ in range(config.iterations):
        cont = np.clip(mean[:, None, :] + std[:, None, :] * rng.standard_normal((B, P, c)), low, high)
        disc = np.zeros((B, P, k), dtype=np.int64)
        for j, pj in enumerate(probs):
            u = rng.random((B, P, 1))
            disc[:, :, j] = np.minimum((u > np.cumsum(pj, axis=-1)[:, None, :]).sum(-1), pj.shape[-1] - 1)
        if config.mode == "actor_candidate":
            cont = np.concatenate([cont, p_cont[:, None, :]], axis=1)
            disc = np.concatenate([disc, p_disc[:, None, :]], axis=1)
        n = cont.shape[1]
        if states_rep is None or states_rep.shape[0] != B * n:
            states_rep = np.repeat(states, n, axis=0)
        values = np.asarray(q(states_rep, cont.reshape(B * n, c), disc.reshape(B * n, k)),
                            dtype=np.float64).reshape(B, n)
        if not np.all(np.isfinite(values)):
            b, i = np.argwhere(~np.isfinite(values))[0]
            raise NumericError(f"non-finite Q value for state {b}, candidate {i}: "
                               f"cont={cont[b, i].tolist()} disc={disc[b, i].tolist()}")

        arg = values.argmax(axis=1)
        top = values[np.arange(B), arg]
        better = top > best_val
        best_val = np.where(better, top, best_val)
        best_cont[better] = cont[better, arg[better]]
        best_disc[better] = disc[better, arg[better]]
        history.append(best_val.copy())

        elite_idx = np.argsort(-values, axis=1, kind="stable")[:, :E]
        if c:
            ec = cont[rows, elite_idx]
            mean = ec.mean(axis=1)
            std = np.maximum(ec.std(axis=1), config.std_floor)
        ed = disc[rows, elite_idx]
        for j, card in enumerate(spec.cardinalities):
            counts = (ed[:, :, j][:, :, None] == np.arange(card)).sum(axis=1)
            probs[j] = (counts + config.smoothing) / (E + config.smoothing * card)

    return CemResult(best_cont, best_disc, best_val, history)


def cem_argmax(
    q: QFunction,
    state,
    spec: ActionSpec,
    config: CemConfig,
    actor_proposal: MixedAction | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[MixedAction, float]:
    """Maximize ``q(state, .)`` and return the best candidate ever evaluated."""
    rng = rng if rng is not None else np.random.default_rng()
    proposal = None if actor_proposal is None else (actor_proposal.continuous[None], actor_proposal.discrete[None])
    res = cem_argmax_batch(q, np.asarray(state, dtype=np.float64)[None], spec, config, rng, proposal)
    return MixedAction(res.cont[0], res.disc[0]), float(res.value[0])


def cem_policy_action(q: QFunction, state, spec: ActionSpec, config: CemConfig,
                      rng: np.random.Generator | None = None) -> MixedAction:
    """The implicit critic policy: plain-mode CEM on the critic."""
    if config.mode != "plain":
        config = CemConfig(**{**config.to_dict(), "mode": "plain"})
    action, _ = cem_argmax(q, state, spec, config, None, rng)
    return action
