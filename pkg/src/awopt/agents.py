"""Critic and actor learners and the QT-Opt / AWAC / AW-Opt compositions.

An :class:`Agent` owns an online critic, a Polyak-averaged target critic and
an actor.  Which of them participate in training, exploration and evaluation
is decided entirely by :class:`AgentConfig`, so every intermediate variant
between the baselines and AW-Opt is a config, not a subclass.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Any

import numpy as np

from . import nn
from .actions import (
    ActionSpec,
    ActorDistribution,
    MixedAction,
    actor_loss_arrays,
    head_backward,
    head_to_distribution,
    sample_arrays,
    variance_nll,
)
from .cem import CemConfig, cem_argmax_batch
from .envs import Transition
from .errors import ConfigError, NumericError, UsageError
from .replay import Batch, ReplayBuffer

TARGET_STRATEGIES = ("awac_expectation", "max_q", "max_q_actor_mean", "max_q_actor_candidate")
EXPLORATION_KINDS = ("actor_only", "critic_only", "episode_switch", "step_switch")
ALGORITHMS = ("qt_opt", "awac", "aw_opt")


@dataclass
class ExplorationStrategy:
    kind: str = "episode_switch"
    p_critic: float = 0.8

    def __post_init__(self):
        if self.kind not in EXPLORATION_KINDS:
            raise ConfigError(f"exploration kind must be one of {EXPLORATION_KINDS}")
        if not 0.0 <= self.p_critic <= 1.0:
            raise ConfigError("p_critic must lie in [0, 1]")

    @property
    def uses_actor(self) -> bool:
        return self.kind == "actor_only" or (self.kind in ("episode_switch", "step_switch") and self.p_critic < 1.0)


@dataclass
class AgentConfig:
    algorithm: str = "aw_opt"
    gamma: float = 0.9
    temperature: float = 1.0          # lambda in exp(Adv / lambda)
    adv_clip: float = 20.0
    n_adv_samples: int = 10
    target_strategy: str = "max_q_actor_candidate"
    positive_filtering: bool = True
    actor_filter: str = "episode"     # or "reward": only reward-1 transitions
    balanced_critic: bool = True
    exploration: ExplorationStrategy = field(default_factory=ExplorationStrategy)
    eval_policy: str = "actor"        # or "cem"
    tau: float = 0.01
    critic_lr: float = 1e-3
    actor_lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 64
    hidden: tuple[int, ...] = (64, 64)
    variance_weight: float = 0.1
    cem: CemConfig = field(default_factory=CemConfig)

    def __post_init__(self):
        if isinstance(self.exploration, dict):
            self.exploration = ExplorationStrategy(**self.exploration)
        if isinstance(self.cem, dict):
            self.cem = CemConfig(**self.cem)
        self.hidden = tuple(self.hidden)
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"algorithm must be one of {ALGORITHMS}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be > 0")
        if self.adv_clip < 1:
            raise ConfigError("adv_clip must be >= 1")
        if self.n_adv_samples < 1:
            raise ConfigError("n_adv_samples must be >= 1")
        if self.target_strategy not in TARGET_STRATEGIES:
            raise ConfigError(f"target_strategy must be one of {TARGET_STRATEGIES}")
        if self.actor_filter not in ("episode", "reward"):
            raise ConfigError("actor_filter must be 'episode' or 'reward'")
        if self.eval_policy not in ("actor", "cem"):
            raise ConfigError("eval_policy must be 'actor' or 'cem'")
        if not 0.0 <= self.tau <= 1.0:
            raise ConfigError("tau must lie in [0, 1]")
        if self.algorithm == "qt_opt":
            if self.exploration.uses_actor:
                raise ConfigError("qt_opt has no actor in the loop; exploration must be critic_only")
            if self.target_strategy != "max_q":
                raise ConfigError("qt_opt computes targets with max_q only")
            if self.eval_policy != "cem":
                raise ConfigError("qt_opt evaluates with the CEM policy")

    def to_dict(self) -> dict:
        out: dict[str, Any] = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "exploration":
                v = {"kind": v.kind, "p_critic": v.p_critic}
            elif f.name == "cem":
                v = v.to_dict()
            elif f.name == "hidden":
                v = list(v)
            out[f.name] = v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "AgentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown agent config keys: {sorted(unknown)}")
        return cls(**d)


# -- named configurations --------------------------------------------------
_VARIANTS: dict[str, tuple[str, dict]] = {
    "qt_opt": ("qt_opt", {}),
    "awac": ("awac", {}),
    "aw_opt": ("aw_opt", {}),
    "awac_p": ("awac", {"positive_filtering": True, "balanced_critic": True}),
    "awac_p_elrs": ("awac", {"positive_filtering": True, "balanced_critic": True,
                             "exploration": {"kind": "episode_switch", "p_critic": 0.8}}),
    "aw_opt_no_positive_filtering": ("aw_opt", {"positive_filtering": False}),
    "aw_opt_no_actor_candidate": ("aw_opt", {"target_strategy": "awac_expectation"}),
    "aw_opt_no_hybrid_exploration": ("aw_opt", {"exploration": {"kind": "actor_only", "p_critic": 0.0}}),
}
VARIANTS = tuple(_VARIANTS)


def _base(name: str) -> dict:
    if name == "qt_opt":
        return dict(algorithm="qt_opt", target_strategy="max_q", positive_filtering=False,
                    balanced_critic=False, exploration={"kind": "critic_only", "p_critic": 1.0},
                    eval_policy="cem")
    if name == "awac":
        return dict(algorithm="awac", target_strategy="awac_expectation", positive_filtering=False,
                    balanced_critic=False, exploration={"kind": "actor_only", "p_critic": 0.0},
                    eval_policy="actor")
    return dict(algorithm="aw_opt", target_strategy="max_q_actor_candidate", positive_filtering=True,
                balanced_critic=True, exploration={"kind": "episode_switch", "p_critic": 0.8},
                eval_policy="actor")


def make_algorithm(name: str, **overrides) -> AgentConfig:
    """Build the config for a named algorithm or intermediate variant.

    ``overrides`` use field names of :class:`AgentConfig`; nested sections
    accept dicts or dotted keys such as ``exploration.p_critic``.
    """
    if name not in _VARIANTS:
        raise ConfigError(f"unknown algorithm {name!r}; choose from {VARIANTS}")
    base_name, variant = _VARIANTS[name]
    d = _base(base_name)
    d.update(variant)
    for key, value in overrides.items():
        _set_dotted(d, key, value)
    return AgentConfig.from_dict(d)


def _set_dotted(d: dict, key: str, value) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        sub = cur.get(p)
        if sub is None:
            sub = {}
        elif isinstance(sub, ExplorationStrategy):
            sub = {"kind": sub.kind, "p_critic": sub.p_critic}
        elif isinstance(sub, CemConfig):
            sub = sub.to_dict()
        cur[p] = sub
        cur = sub
    if isinstance(cur.get(parts[-1]), dict) and isinstance(value, dict):
        cur[parts[-1]] = {**cur[parts[-1]], **value}
    else:
        cur[parts[-1]] = value


# -- networks ---------------------------------------------------------------
@dataclass
class CriticNets:
    online: nn.MlpParams
    target: nn.MlpParams
    tau: float = 0.01

    def __post_init__(self):
        shapes = [a.shape for a in self.online.arrays()]
        if shapes != [a.shape for a in self.target.arrays()]:
            raise ConfigError("online and target critic shapes differ")


@dataclass
class ActorNet:
    params: nn.MlpParams
    spec: ActionSpec

    def __post_init__(self):
        if self.params.out_dim != self.spec.head_dim:
            raise ConfigError(f"actor output {self.params.out_dim} != head width {self.spec.head_dim}")


def init_critic(obs_dim: int, spec: ActionSpec, hidden, rng, tau: float = 0.01) -> CriticNets:
    params = nn.init_mlp([obs_dim + spec.encoded_dim, *hidden, 1], rng)
    return CriticNets(params, params.copy(), tau)


def init_actor(obs_dim: int, spec: ActionSpec, hidden, rng) -> ActorNet:
    params = nn.init_mlp([obs_dim, *hidden, spec.head_dim], rng)
    # start the variance head at std = range / 4
    c = spec.n_cont
    var0 = ((spec.high - spec.low) / 4.0) ** 2
    last = params.layers[-1]
    last.weight[:, c:2 * c] *= 0.1
    last.bias[c:2 * c] = np.log(np.expm1(var0))
    return ActorNet(params, spec)


def q_values(params: nn.MlpParams, spec: ActionSpec, obs, cont, disc) -> np.ndarray:
    x = np.concatenate([np.atleast_2d(obs), spec.encode(cont, disc).reshape(len(np.atleast_2d(obs)), -1)], axis=1)
    return nn.forward(params, x)[:, 0]


def q_function(params: nn.MlpParams, spec: ActionSpec):
    """Vectorized ``q(states, cont, disc)`` closure for CEM."""
    return lambda s, c, d: q_values(params, spec, s, c, d)


def actor_distribution(actor: ActorNet, obs) -> ActorDistribution:
    return head_to_distribution(actor.spec, nn.forward(actor.params, np.atleast_2d(obs)))


def actor_mode(actor: ActorNet, obs) -> tuple[np.ndarray, np.ndarray]:
    return actor_distribution(actor, obs).mode(actor.spec)


# -- Bellman targets --------------------------------------------------------
_CEM_MODE = {"max_q": "plain", "max_q_actor_mean": "actor_mean", "max_q_actor_candidate": "actor_candidate"}


def bellman_targets(critic: CriticNets, actor: ActorNet | None, spec: ActionSpec, reward, next_obs, done,
                    strategy: str, gamma: float, cem_config: CemConfig, rng: np.random.Generator,
                    n_adv_samples: int = 10) -> np.ndarray:
    """``r`` on terminal rows, ``r + gamma * Q_target(s', a*)`` elsewhere."""
    if strategy not in TARGET_STRATEGIES:
        raise ConfigError(f"unknown target strategy {strategy!r}")
    if strategy != "max_q" and actor is None:
        raise UsageError(f"target strategy {strategy!r} needs an actor")
    reward = np.asarray(reward, dtype=np.float64)
    done = np.asarray(done, dtype=bool)
    targets = reward.copy()
    live = np.flatnonzero(~done)
    if live.size == 0 or gamma == 0.0:
        return targets
    s2 = np.atleast_2d(next_obs)[live]
    if strategy == "awac_expectation":
        dist = actor_distribution(actor, s2)
        total = np.zeros(live.size)
        for _ in range(n_adv_samples):
            c, d = sample_arrays(dist, spec, rng)
            total += q_values(critic.target, spec, s2, c, d)
        v_next = total / n_adv_samples
    else:
        cfg = replace(cem_config, mode=_CEM_MODE[strategy])
        proposal = actor_mode(actor, s2) if strategy != "max_q" else None
        v_next = cem_argmax_batch(q_function(critic.target, spec), s2, spec, cfg, rng, proposal).value
    targets[live] = reward[live] + gamma * v_next
    if not np.all(np.isfinite(targets)):
        raise NumericError("non-finite Bellman target")
    return targets


def bellman_target(critic: CriticNets, actor: ActorNet | None, transition: Transition, strategy: str,
                   cem_config: CemConfig, rng: np.random.Generator, gamma: float = 0.9,
                   n_adv_samples: int = 10, spec: ActionSpec | None = None) -> float:
    spec = spec if spec is not None else actor.spec
    return float(bellman_targets(critic, actor, spec, [transition.reward], transition.next_obs[None],
                                 [transition.done], strategy, gamma, cem_config, rng, n_adv_samples)[0])


# -- updates ---------------------------------------------------------------
def critic_update(critic: CriticNets, spec: ActionSpec, obs, cont, disc, targets,
                  optimizer: nn.OptimizerState) -> float:
    """One step on the mean squared Bellman error, then Polyak-average the target.

    Returns the loss before the step.
    """
    obs = np.atleast_2d(obs)
    targets = np.asarray(targets, dtype=np.float64)
    if len(targets) != len(obs):
        raise UsageError("targets are not aligned with the batch")
    x = np.concatenate([obs, spec.encode(cont, disc).reshape(len(obs), -1)], axis=1)
    q, cache = nn.forward_cached(critic.online, x)
    err = q[:, 0] - targets
    loss = float(np.mean(err * err))
    if not math.isfinite(loss):
        raise NumericError("non-finite critic loss")
    grads, _ = nn.backward_cached(critic.online, cache, (2.0 * err / len(err))[:, None])
    critic.online = nn.apply_gradients(critic.online, grads, optimizer)
    critic.target = nn.polyak(critic.target, critic.online, critic.tau)
    return loss


def advantages(critic: CriticNets, actor: ActorNet, obs, cont, disc, n_adv_samples: int,
               rng: np.random.Generator) -> np.ndarray:
    """``Q_target(s, a_data) - mean_i Q_target(s, a_i)`` with ``a_i`` drawn from the actor."""
    if n_adv_samples < 1:
        raise UsageError("n_adv_samples must be >= 1")
    obs = np.atleast_2d(obs)
    spec = actor.spec
    q_data = q_values(critic.target, spec, obs, cont, disc)
    dist = actor_distribution(actor, obs)
    total = np.zeros(len(obs))
    for _ in range(n_adv_samples):
        c, d = sample_arrays(dist, spec, rng)
        total += q_values(critic.target, spec, obs, c, d)
    return q_data - total / n_adv_samples


def advantage(critic: CriticNets, actor: ActorNet, transition: Transition, n_adv_samples: int,
              rng: np.random.Generator) -> float:
    a = transition.action
    return float(advantages(critic, actor, transition.obs[None], a.continuous[None], a.discrete[None],
                            n_adv_samples, rng)[0])


_LOG_TINY = math.log(np.finfo(np.float64).tiny)


def advantage_weights(adv, temperature: float, adv_clip: float) -> np.ndarray:
    """``min(exp(adv / temperature), adv_clip)``, clipped in log space so it never overflows.

    The log weight is also floored at the smallest normal double so weights stay strictly positive.
    """
    log_w = np.asarray(adv, dtype=np.float64) / temperature
    return np.exp(np.clip(log_w, _LOG_TINY, math.log(adv_clip)))


def actor_gradients(actor: ActorNet, obs, cont, disc, weights, variance_weight: float = 0.0):
    """Gradient of ``mean_i w_i * L_A(a_i, pi(s_i))`` w.r.t. the actor parameters.

    Returns ``(weighted_loss, grads)``.
    """
    obs = np.atleast_2d(obs)
    weights = np.asarray(weights, dtype=np.float64)
    spec = actor.spec
    raw, cache = nn.forward_cached(actor.params, obs)
    dist = head_to_distribution(spec, raw)
    loss, dgrad = actor_loss_arrays(spec, cont, disc, dist)
    n = len(obs)
    scale = (weights / n)[:, None]
    dgrad.mean = dgrad.mean * scale
    dgrad.probs = [g * scale for g in dgrad.probs]
    total = float(np.sum(weights * loss) / n)
    if variance_weight > 0 and spec.n_cont:
        nll, g_var = variance_nll(spec, cont, dist)
        dgrad.variance = variance_weight * g_var * scale
        total += variance_weight * float(np.sum(weights * nll) / n)
    draw = head_backward(spec, raw, dist, dgrad)
    grads, _ = nn.backward_cached(actor.params, cache, draw)
    return total, grads


def actor_update(actor: ActorNet, critic: CriticNets, batch: Batch, config: AgentConfig,
                 optimizer: nn.OptimizerState, rng: np.random.Generator,
                 advantages_override=None) -> float:
    """Advantage-weighted regression step on the actor loss.

    With ``positive_filtering`` the batch must contain only transitions from
    successful episodes; an empty batch leaves the actor untouched.
    """
    if len(batch) == 0:
        return 0.0
    if config.positive_filtering and not np.all(batch.success):
        raise UsageError("positive filtering is on but the actor batch holds failure transitions")
    if advantages_override is None:
        adv = advantages(critic, actor, batch.obs, batch.cont, batch.disc, config.n_adv_samples, rng)
    else:
        adv = np.asarray(advantages_override, dtype=np.float64)
    w = advantage_weights(adv, config.temperature, config.adv_clip)
    if not np.all(np.isfinite(w)):
        raise NumericError("non-finite advantage weights")
    loss, grads = actor_gradients(actor, batch.obs, batch.cont, batch.disc, w, config.variance_weight)
    if not math.isfinite(loss):
        raise NumericError("non-finite actor loss")
    actor.params = nn.apply_gradients(actor.params, grads, optimizer)
    return loss


# -- agent -----------------------------------------------------------------
class Agent:
    def __init__(self, config: AgentConfig, obs_dim: int, spec: ActionSpec, rng: np.random.Generator):
        self.config = config
        self.obs_dim = obs_dim
        self.spec = spec
        self.critic = init_critic(obs_dim, spec, config.hidden, rng, config.tau)
        self.actor = init_actor(obs_dim, spec, config.hidden, rng)
        self.critic_opt = nn.OptimizerState(config.optimizer, config.critic_lr)
        self.actor_opt = nn.OptimizerState(config.optimizer, config.actor_lr)
        self.grad_steps = 0

    # training
    def train_step(self, buffer: ReplayBuffer, rng: np.random.Generator) -> dict:
        cfg = self.config
        batch = buffer.sample_critic_batch(cfg.batch_size, rng, balanced=cfg.balanced_critic)
        targets = bellman_targets(self.critic, self.actor, self.spec, batch.reward, batch.next_obs, batch.done,
                                  cfg.target_strategy, cfg.gamma, cfg.cem, rng, cfg.n_adv_samples)
        critic_loss = critic_update(self.critic, self.spec, batch.obs, batch.cont, batch.disc,
                                    targets, self.critic_opt)
        if cfg.positive_filtering:
            try:
                actor_batch = buffer.sample_actor_batch(cfg.batch_size, rng, cfg.actor_filter)
            except UsageError:
                actor_batch = None
        else:
            actor_batch = buffer.sample_uniform(cfg.batch_size, rng)
        actor_loss = 0.0
        if actor_batch is not None:
            actor_loss = actor_update(self.actor, self.critic, actor_batch, cfg, self.actor_opt, rng)
        self.grad_steps += 1
        return {"critic_loss": critic_loss, "actor_loss": actor_loss}

    # acting
    def q(self):
        return q_function(self.critic.online, self.spec)

    def cem_action(self, obs, rng: np.random.Generator) -> MixedAction:
        res = cem_argmax_batch(self.q(), np.asarray(obs)[None], self.spec, replace(self.config.cem, mode="plain"), rng)
        return MixedAction(res.cont[0], res.disc[0])

    def actor_sample(self, obs, rng: np.random.Generator) -> MixedAction:
        c, d = sample_arrays(actor_distribution(self.actor, obs), self.spec, rng)
        return MixedAction(c[0], d[0])

    def actor_greedy(self, obs) -> MixedAction:
        c, d = actor_mode(self.actor, obs)
        return MixedAction(c[0], d[0])

    def begin_episode(self, rng: np.random.Generator) -> bool:
        """Per-episode coin for the episode-level switcher: True means use the critic."""
        return bool(rng.random() < self.config.exploration.p_critic)

    def explore(self, obs, episode_flag: bool, rng: np.random.Generator) -> tuple[MixedAction, str]:
        return select_exploration_action(self, obs, self.config.exploration, episode_flag, rng)

    def act(self, obs, rng: np.random.Generator) -> MixedAction:
        """Deterministic evaluation policy."""
        if self.config.eval_policy == "cem":
            return self.cem_action(obs, rng)
        return self.actor_greedy(obs)


def select_exploration_action(agent: Agent, state, strategy: ExplorationStrategy, episode_flag: bool,
                              rng: np.random.Generator) -> tuple[MixedAction, str]:
    """Pick the behavior policy for one step; returns the action and ``"actor"`` or ``"cem"``."""
    kind = strategy.kind
    # one draw per step for every strategy keeps rng streams aligned across them
    coin = rng.random()
    if kind == "actor_only":
        use_critic = False
    elif kind == "critic_only":
        use_critic = True
    elif kind == "episode_switch":
        use_critic = episode_flag
    else:
        use_critic = bool(coin < strategy.p_critic)
    if use_critic:
        return agent.cem_action(state, rng), "cem"
    return agent.actor_sample(state, rng), "actor"
