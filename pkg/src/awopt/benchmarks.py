"""The desk-scale navigation protocol used for the comparison experiments.

Every comparison shares one setup so that results are at equal budget:
100 successful demonstrations from the scripted controller run with heavy
action noise, 2,000 offline gradient steps, then online collection with 10
gradient steps per episode until 5,000 environment transitions are used.
The noisy demonstrations leave the cloned policy well short of perfect, so
online finetuning has room to help or hurt.
"""
from __future__ import annotations

from .experiment import ExperimentConfig

SEEDS = (0, 1, 2)
DEMO_NOISE = 1.0
DEMO_EPISODES = 100
PRETRAIN_STEPS = 2000
ONLINE_TRANSITIONS = 5000
GRAD_STEPS_PER_EPISODE = 10
RANDOM_NEGATIVES = 10_000

ABLATIONS = ("aw_opt_no_positive_filtering", "aw_opt_no_actor_candidate", "aw_opt_no_hybrid_exploration")


def demo_source(episodes: int = DEMO_EPISODES, noise: float = DEMO_NOISE) -> dict:
    return {"policy": "scripted", "episodes": episodes, "keep": "positives_only", "noise": noise, "tag": "demo"}


def negatives_source(episodes: int = RANDOM_NEGATIVES) -> dict:
    return {"policy": "random", "episodes": episodes, "keep": "negatives_only", "tag": "random"}


def nav_config(algorithm: str, seed: int, online_transitions: int = ONLINE_TRANSITIONS,
               random_negatives: int = 0, **overrides) -> ExperimentConfig:
    """Config for one seed of the standard nav comparison."""
    data = [demo_source()]
    if random_negatives:
        data.append(negatives_source(random_negatives))
    return ExperimentConfig(
        env="nav",
        algorithm=algorithm,
        overrides=dict(overrides),
        data=data,
        pretrain_steps=PRETRAIN_STEPS,
        online_transitions=online_transitions,
        grad_steps_per_episode=GRAD_STEPS_PER_EPISODE,
        eval_every_episodes=50,
        eval_episodes=100,
        seed=seed,
    )
