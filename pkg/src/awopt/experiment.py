"""Offline pretraining followed by online finetuning, with evaluation records."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import nn
from .agents import Agent, AgentConfig, make_algorithm
from .envs import (
    Env,
    Episode,
    Transition,
    generate_dataset,
    load_episodes,
    make_env,
    random_policy,
    scripted_policy,
)
from .errors import ConfigError, NumericError
from .replay import ReplayBuffer

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("step", "transitions", "phase", "success_rate")
TIMING_COLUMNS = ("step", "phase", "action_select_ms")


@dataclass
class ExperimentConfig:
    env: str = "nav"
    env_kwargs: dict = field(default_factory=dict)
    algorithm: str = "aw_opt"
    overrides: dict = field(default_factory=dict)
    # each source: {"policy": scripted|random, "episodes", "keep", "noise", "tag"} or {"path": ...}
    data: list = field(default_factory=lambda: [
        {"policy": "scripted", "episodes": 100, "keep": "positives_only", "noise": 0.0, "tag": "demo"}])
    pretrain_steps: int = 2000
    online_episodes: int = 0
    # transition budget; the phase ends after the episode that reaches it (0 = no budget)
    online_transitions: int = 0
    grad_steps_per_episode: int = 1
    eval_every_steps: int = 0          # offline cadence, 0 = only at the end of the phase
    eval_every_episodes: int = 50      # online cadence
    eval_episodes: int = 100
    seed: int = 0
    eval_seed: int | None = None
    buffer_capacity: int = 200_000

    def __post_init__(self):
        if self.pretrain_steps < 0:
            raise ConfigError("pretrain_steps must be >= 0")
        if self.online_episodes < 0 or self.online_transitions < 0:
            raise ConfigError("online budgets must be >= 0")
        if self.eval_episodes < 1:
            raise ConfigError("eval_episodes must be >= 1")
        if self.grad_steps_per_episode < 0:
            raise ConfigError("grad_steps_per_episode must be >= 0")

    def agent_config(self) -> AgentConfig:
        return make_algorithm(self.algorithm, **self.overrides)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class MetricsRecord:
    step: int
    transitions: int
    phase: str
    success_rate: float
    action_select_ms: float = float("nan")

    def __post_init__(self):
        if not 0.0 <= self.success_rate <= 1.0:
            raise ValueError("success_rate must lie in [0, 1]")


@dataclass
class RunStreams:
    """Independent random streams for one run."""

    init: np.random.Generator
    data: np.random.Generator
    train: np.random.Generator
    explore: np.random.Generator
    eval_seed: int

    @classmethod
    def from_seed(cls, seed: int, eval_seed: int | None = None) -> "RunStreams":
        children = np.random.SeedSequence(seed).spawn(4)
        gens = [np.random.default_rng(c) for c in children]
        if eval_seed is None:
            eval_seed = int(np.random.SeedSequence([seed, 9176]).generate_state(1)[0])
        return cls(*gens, eval_seed=eval_seed)


class PolicyAgent:
    """Wrap a plain ``policy(obs, rng)`` callable so it can be evaluated like an agent."""

    def __init__(self, policy):
        self.policy = policy

    def act(self, obs, rng):
        return self.policy(obs, rng)


def evaluate(agent, env: Env, episodes: int, rng: np.random.Generator) -> tuple[float, float]:
    """Greedy rollouts; returns success fraction and mean milliseconds per action selection."""
    if episodes < 1:
        raise ConfigError("episodes must be >= 1")
    successes = 0
    elapsed, calls = 0.0, 0
    for _ in range(episodes):
        obs = env.reset(rng)
        done, reward = False, 0.0
        while not done:
            t0 = time.perf_counter()
            action = agent.act(obs, rng)
            elapsed += time.perf_counter() - t0
            calls += 1
            obs, reward, done = env.step(action)
        successes += reward == 1.0
    return successes / episodes, 1000.0 * elapsed / max(calls, 1)


def transitions_to_threshold(records: Sequence[MetricsRecord], threshold: float, window: int = 3) -> int | None:
    """First transition count where the trailing ``window``-record mean success reaches ``threshold``."""
    rates = [r.success_rate for r in records]
    for i, r in enumerate(records):
        lo = max(0, i - window + 1)
        if np.mean(rates[lo:i + 1]) >= threshold:
            return r.transitions
    return None


def build_dataset(config: ExperimentConfig, rng: np.random.Generator) -> list[Episode]:
    episodes: list[Episode] = []
    for src in config.data:
        if "path" in src:
            paths = src["path"] if isinstance(src["path"], list) else [src["path"]]
            episodes += load_episodes(paths)
            continue
        env = make_env(config.env, **config.env_kwargs)
        kind = src.get("policy", "scripted")
        if kind == "scripted":
            policy = scripted_policy(env, float(src.get("noise", 0.0)))
        elif kind == "random":
            policy = random_policy(env)
        else:
            raise ConfigError(f"unknown data policy {kind!r}")
        tag = src.get("tag", "demo" if kind == "scripted" else "random")
        episodes += generate_dataset(env, policy, int(src["episodes"]), src.get("keep", "all"), rng, tag,
                                     first_id=len(episodes))
    return episodes


@dataclass
class RunResult:
    config: ExperimentConfig
    agent: Agent
    buffer: ReplayBuffer
    records: list[MetricsRecord]
    env: Env
    offline_env_steps: int = 0   # training-env steps taken before the online phase; always 0

    def phase(self, name: str) -> list[MetricsRecord]:
        return [r for r in self.records if r.phase == name]

    @property
    def post_offline_success(self) -> float:
        return self.phase("offline")[-1].success_rate

    @property
    def final_success(self) -> float:
        return self.records[-1].success_rate

    def summary(self, threshold: float | None = None) -> dict[str, Any]:
        online = self.phase("online")
        final = self.final_success
        thr = final if threshold is None else threshold
        return {
            "post_il_success": self.post_offline_success,
            "final_success": final,
            "peak_online_success": max((r.success_rate for r in online), default=float("nan")),
            "min_online_success": min((r.success_rate for r in online), default=float("nan")),
            "transitions": self.records[-1].transitions,
            "transitions_to_threshold": transitions_to_threshold(online, thr) if online else None,
            "action_select_ms": self.records[-1].action_select_ms,
        }


def _eval_record(agent, env, config, streams, step, transitions, phase) -> MetricsRecord:
    rate, ms = evaluate(agent, env, config.eval_episodes, np.random.default_rng(streams.eval_seed))
    log.info("%s step=%d transitions=%d success=%.3f", phase, step, transitions, rate)
    return MetricsRecord(step, transitions, phase, rate, ms)


def run_offline_phase(config: ExperimentConfig, agent: Agent, buffer: ReplayBuffer, env: Env,
                      streams: RunStreams) -> list[MetricsRecord]:
    """Gradient steps on the prior data only; the environment is touched for evaluation alone."""
    if len(buffer) == 0:
        raise ConfigError("offline phase needs a non-empty buffer")
    records = []
    for step in range(1, config.pretrain_steps + 1):
        agent.train_step(buffer, streams.train)
        if config.eval_every_steps and step % config.eval_every_steps == 0 and step != config.pretrain_steps:
            records.append(_eval_record(agent, env, config, streams, agent.grad_steps, 0, "offline"))
    records.append(_eval_record(agent, env, config, streams, agent.grad_steps, 0, "offline"))
    return records


def collect_episode(agent: Agent, env: Env, rng: np.random.Generator, episode_id: int) -> Episode:
    obs = env.reset(rng)
    flag = agent.begin_episode(rng)
    ep = Episode(episode_id=episode_id)
    tags = set()
    done = False
    while not done:
        action, source = agent.explore(obs, flag, rng)
        tags.add(source)
        nxt, reward, done = env.step(action)
        ep.transitions.append(Transition(obs, action, reward, nxt, done))
        obs = nxt
    ep.behavior_tag = tags.pop() if len(tags) == 1 else "cem"
    return ep


def run_online_phase(agent: Agent, config: ExperimentConfig, buffer: ReplayBuffer, env: Env,
                     streams: RunStreams, checkpoint_dir: Path | None = None,
                     first_episode_id: int = 0, eval_env: Env | None = None) -> list[MetricsRecord]:
    """Collect, store and train, evaluating on ``eval_env`` (default: ``env``)."""
    eval_env = eval_env if eval_env is not None else env
    records = []
    transitions = 0
    i = 0
    try:
        while config.online_episodes or config.online_transitions:
            i += 1
            ep = collect_episode(agent, env, streams.explore, first_episode_id + i)
            buffer.insert_episode(ep)
            transitions += len(ep)
            for _ in range(config.grad_steps_per_episode):
                agent.train_step(buffer, streams.train)
            last = (config.online_episodes and i >= config.online_episodes) or \
                (config.online_transitions and transitions >= config.online_transitions)
            if (config.eval_every_episodes and i % config.eval_every_episodes == 0) or last:
                records.append(_eval_record(agent, eval_env, config, streams, agent.grad_steps, transitions, "online"))
            if last:
                break
    except NumericError:
        if checkpoint_dir is not None:
            save_checkpoint(agent, Path(checkpoint_dir) / "crash")
        raise
    return records


def run_experiment(config: ExperimentConfig, prior: list[Episode] | None = None,
                   out_dir: Path | None = None) -> RunResult:
    streams = RunStreams.from_seed(config.seed, config.eval_seed)
    env = make_env(config.env, **config.env_kwargs)
    eval_env = make_env(config.env, **config.env_kwargs)
    agent = Agent(config.agent_config(), env.observation_dim, env.action_spec, streams.init)
    buffer = ReplayBuffer(env.observation_dim, env.action_spec, config.buffer_capacity)
    if prior is None:
        prior = build_dataset(config, streams.data)
    buffer.insert_episodes(prior)
    records = run_offline_phase(config, agent, buffer, eval_env, streams)
    offline_steps = env.total_steps
    records += run_online_phase(agent, config, buffer, env, streams, out_dir,
                                first_episode_id=max((e.episode_id for e in prior), default=0) + 1,
                                eval_env=eval_env)
    result = RunResult(config, agent, buffer, records, env, offline_env_steps=offline_steps)
    if out_dir is not None:
        write_outputs(result, Path(out_dir))
    return result


# -- output files ----------------------------------------------------------
def write_metrics_csv(records: Sequence[MetricsRecord], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for r in records:
            w.writerow([r.step, r.transitions, r.phase, repr(float(r.success_rate))])


def read_metrics_csv(path: Path) -> list[MetricsRecord]:
    with open(path, newline="", encoding="utf-8") as f:
        return [MetricsRecord(int(row["step"]), int(row["transitions"]), row["phase"], float(row["success_rate"]))
                for row in csv.DictReader(f)]


def write_timing_csv(records: Sequence[MetricsRecord], path: Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(TIMING_COLUMNS)
        for r in records:
            w.writerow([r.step, r.phase, f"{r.action_select_ms:.6f}"])


def save_checkpoint(agent: Agent, directory: Path) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    nn.save_params(agent.critic.online, directory / "critic.bin")
    nn.save_params(agent.critic.target, directory / "critic_target.bin")
    nn.save_params(agent.actor.params, directory / "actor.bin")
    (directory / "agent.json").write_text(json.dumps(agent.config.to_dict(), indent=2, sort_keys=True))


def load_checkpoint(directory: Path, obs_dim: int, spec) -> Agent:
    directory = Path(directory)
    cfg = AgentConfig.from_dict(json.loads((directory / "agent.json").read_text()))
    agent = Agent(cfg, obs_dim, spec, np.random.default_rng(0))
    agent.critic.online = nn.load_params(directory / "critic.bin")
    agent.critic.target = nn.load_params(directory / "critic_target.bin")
    agent.actor.params = nn.load_params(directory / "actor.bin")
    return agent


def write_outputs(result: RunResult, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    write_metrics_csv(result.records, out_dir / "metrics.csv")
    write_timing_csv(result.records, out_dir / "timing.csv")
    save_checkpoint(result.agent, out_dir / "checkpoint")
