import math

import numpy as np
import pytest

from awopt import nn
from awopt.actions import (
    ActionSpec,
    ContinuousSubaction as C,
    DiscreteSubaction as D,
    MixedAction,
)
from awopt.agents import (
    Agent,
    AgentConfig,
    ExplorationStrategy,
    VARIANTS,
    actor_distribution,
    actor_gradients,
    actor_update,
    advantage,
    advantage_weights,
    bellman_target,
    bellman_targets,
    critic_update,
    init_actor,
    init_critic,
    make_algorithm,
    q_values,
    select_exploration_action,
)
from awopt.cem import CemConfig
from awopt.envs import Transition
from awopt.errors import ConfigError, UsageError
from awopt.replay import Batch
from oracles import value_iteration

MIXED = ActionSpec((C("a", -1, 1), C("b", 0, 2)), (D("d", 3),))
OBS = 4


def nets(seed=0, spec=MIXED, obs_dim=OBS, tau=0.01):
    rng = np.random.default_rng(seed)
    return init_critic(obs_dim, spec, (16, 16), rng, tau), init_actor(obs_dim, spec, (16, 16), rng)


def transition(reward=0.0, done=False, seed=0):
    rng = np.random.default_rng(seed)
    return Transition(rng.normal(size=OBS), MixedAction([0.1, 1.0], [2]), reward, rng.normal(size=OBS), done)


def constant_critic(value, spec=MIXED, obs_dim=OBS):
    critic, _ = nets(spec=spec, obs_dim=obs_dim)
    for net in (critic.online, critic.target):
        net.layers[-1].weight[:] = 0.0
        net.layers[-1].bias[:] = value
    return critic


def batch_of(obs, cont, disc, success=True):
    n = len(obs)
    return Batch(np.asarray(obs, float), np.asarray(cont, float), np.asarray(disc, np.int64), np.zeros(n),
                 np.asarray(obs, float), np.zeros(n, bool), np.full(n, success), np.arange(n), np.zeros(n, np.int64),
                 (n, 0))


# -- targets ---------------------------------------------------------------
@pytest.mark.parametrize("strategy", ["awac_expectation", "max_q", "max_q_actor_mean", "max_q_actor_candidate"])
def test_terminal_target_is_reward(strategy):
    critic, actor = nets()
    t = transition(reward=1.0, done=True)
    assert bellman_target(critic, actor, t, strategy, CemConfig(), np.random.default_rng(0)) == 1.0


@pytest.mark.parametrize("strategy", ["awac_expectation", "max_q", "max_q_actor_mean", "max_q_actor_candidate"])
def test_zero_discount_target_is_reward(strategy):
    critic, actor = nets()
    t = transition(reward=0.0, done=False)
    assert bellman_target(critic, actor, t, strategy, CemConfig(), np.random.default_rng(0), gamma=0.0) == 0.0


def test_nonterminal_max_q_target_bootstraps():
    critic = constant_critic(2.5)
    t = transition(reward=0.0, done=False)
    assert bellman_target(critic, None, t, "max_q", CemConfig(), np.random.default_rng(0), gamma=0.9,
                          spec=MIXED) == pytest.approx(2.25)


def test_candidate_target_dominates_expectation_when_samples_are_in_pool():
    # a discrete-only actor with a one-hot head: every expectation sample equals the injected candidate
    spec = ActionSpec((), (D("d", 3),))
    critic, actor = nets(spec=spec, seed=3)
    actor.params.layers[-1].weight[:] = 0.0
    actor.params.layers[-1].bias[:] = [0.0, 1e3, 0.0]
    for seed in range(10):
        t = transition(seed=seed)
        kw = dict(cem_config=CemConfig(population=8, elite_count=2), gamma=0.9, spec=spec)
        cand = bellman_target(critic, actor, t, "max_q_actor_candidate", rng=np.random.default_rng(seed), **kw)
        expect = bellman_target(critic, actor, t, "awac_expectation", rng=np.random.default_rng(seed), **kw)
        # the expectation is a float mean of identical values, so allow one rounding step
        assert cand >= expect - 1e-12


# -- critic ----------------------------------------------------------------
def test_polyak_endpoints():
    t = transition()
    for tau in (1.0, 0.0):
        critic, _ = nets(tau=tau)
        before = critic.target.copy()
        critic_update(critic, MIXED, t.obs[None], t.action.continuous[None], t.action.discrete[None], [1.0],
                      nn.OptimizerState("adam", 1e-2))
        ref = critic.online if tau == 1.0 else before
        for a, b in zip(critic.target.arrays(), ref.arrays()):
            np.testing.assert_array_equal(a, b)


def test_critic_regresses_to_constant_target():
    critic, _ = nets(tau=1.0)
    t = transition()
    opt = nn.OptimizerState("adam", 1e-2)
    args = (t.obs[None], t.action.continuous[None], t.action.discrete[None])
    losses = [critic_update(critic, MIXED, *args, [0.7], opt) for _ in range(500)]
    assert losses[-1] < losses[0]
    assert q_values(critic.online, MIXED, *args)[0] == pytest.approx(0.7, abs=1e-3)


def test_critic_update_rejects_misaligned_targets():
    critic, _ = nets()
    t = transition()
    with pytest.raises(UsageError):
        critic_update(critic, MIXED, t.obs[None], t.action.continuous[None], t.action.discrete[None], [1.0, 2.0],
                      nn.OptimizerState("sgd", 0.1))


# 3-state chain: "left" (0) steps back (floored at 0); "right" (1) steps forward,
# and "right" from state 2 ends the episode with reward 1.
def chain_step(s, a):
    if a == 1:
        return (s, 1.0, True) if s == 2 else (s + 1, 0.0, False)
    return max(s - 1, 0), 0.0, False


CHAIN_SPEC = ActionSpec((), (D("move", 2),))


def chain_batch():
    rows = [(s, a, *chain_step(s, a)) for s in range(3) for a in range(2)]
    eye = np.eye(3)
    obs = np.array([eye[s] for s, *_ in rows])
    nxt = np.array([eye[s2] for _, _, s2, _, _ in rows])
    disc = np.array([[a] for _, a, *_ in rows])
    reward = np.array([r for *_, r, _ in rows])
    done = np.array([d for *_, d in rows])
    return obs, disc, reward, nxt, done


@pytest.mark.parametrize("strategy", ["max_q", "max_q_actor_candidate"])
def test_tabular_chain_converges_to_value_iteration(strategy):
    q_star = value_iteration(3, 2, chain_step, 0.9)
    rng = np.random.default_rng(0)
    critic = init_critic(3, CHAIN_SPEC, (32, 32), rng, tau=0.05)
    actor = init_actor(3, CHAIN_SPEC, (32, 32), rng)
    opt = nn.OptimizerState("adam", 3e-3)
    obs, disc, reward, nxt, done = chain_batch()
    cem = CemConfig(population=16, elite_count=4)
    for _ in range(3000):
        y = bellman_targets(critic, actor, CHAIN_SPEC, reward, nxt, done, strategy, 0.9, cem, rng)
        critic_update(critic, CHAIN_SPEC, obs, np.zeros((6, 0)), disc, y, opt)
    grid = np.array([[q_values(critic.online, CHAIN_SPEC, np.eye(3)[s][None], np.zeros((1, 0)), [[a]])[0]
                      for a in range(2)] for s in range(3)])
    np.testing.assert_allclose(grid, q_star, atol=1e-2)


# -- advantage -------------------------------------------------------------
def test_constant_critic_zero_advantage():
    critic = constant_critic(3.0)
    _, actor = nets()
    assert advantage(critic, actor, transition(), 10, np.random.default_rng(0)) == pytest.approx(0.0, abs=1e-12)


def test_advantage_matches_monte_carlo_oracle():
    critic, actor = nets(seed=5)
    t = transition(seed=2)
    n = 4000
    est = advantage(critic, actor, t, n, np.random.default_rng(1))
    # independent oracle: draw actions by hand from the head's parameters
    dist = actor_distribution(actor, t.obs[None])
    rng = np.random.default_rng(99)
    m = 100_000
    cont = np.clip(dist.mean + np.sqrt(dist.variance) * rng.standard_normal((m, 2)), MIXED.low, MIXED.high)
    disc = rng.choice(3, size=(m, 1), p=dist.probs[0][0])
    x = np.concatenate([np.tile(t.obs, (m, 1)), cont, np.eye(3)[disc[:, 0]]], axis=1)
    qs = nn.forward(critic.target, x)[:, 0]
    q_data = q_values(critic.target, MIXED, t.obs[None], t.action.continuous[None], t.action.discrete[None])[0]
    oracle = q_data - qs.mean()
    se = np.sqrt(qs.var() / n + qs.var() / m)
    assert abs(est - oracle) <= 2 * se


def test_advantage_near_zero_at_deterministic_mode():
    critic, actor = nets(seed=1)
    last = actor.params.layers[-1]
    last.weight[:] = 0.0
    last.bias[:] = [0.2, 0.5, -50.0, -50.0, 0.0, 1e3, 0.0]
    t = transition()
    t.action = MixedAction([0.2, 0.5], [1])
    assert abs(advantage(critic, actor, t, 50, np.random.default_rng(0))) < 1e-2


def test_advantage_weights_bounds():
    w = advantage_weights(np.array([-1e6, -1.0, 0.0, 1.0, 1e6]), 1.0, 20.0)
    assert np.all(w > 0) and np.all(w <= 20.0)
    np.testing.assert_allclose(w[1:4], [math.exp(-1), 1.0, math.e])
    assert w[-1] == pytest.approx(20.0)


# -- actor -----------------------------------------------------------------
def sgd_delta(actor, batch, adv, cfg):
    before = actor.params.copy()
    actor_update(actor, None, batch, cfg, nn.OptimizerState("sgd", 1.0), np.random.default_rng(0),
                 advantages_override=adv)
    return [b - a for a, b in zip(actor.params.arrays(), before.arrays())]


def test_zero_advantage_reduces_to_cloning():
    _, actor = nets(seed=2)
    rng = np.random.default_rng(0)
    obs, cont, disc = rng.normal(size=(5, OBS)), rng.uniform(0, 1, (5, 2)), rng.integers(0, 3, (5, 1))
    cfg = make_algorithm("aw_opt", temperature=0.37)
    _, bc = actor_gradients(actor, obs, cont, disc, np.ones(5), cfg.variance_weight)
    delta = sgd_delta(actor, batch_of(obs, cont, disc), np.zeros(5), cfg)
    for g, d in zip(bc, delta):
        np.testing.assert_allclose(d, g, rtol=1e-12, atol=1e-15)


def test_two_sample_weighted_gradient():
    _, actor = nets(seed=4)
    rng = np.random.default_rng(1)
    obs, cont, disc = rng.normal(size=(2, OBS)), rng.uniform(0, 1, (2, 2)), rng.integers(0, 3, (2, 1))
    cfg = make_algorithm("aw_opt", temperature=1.0, adv_clip=20.0)
    _, g1 = actor_gradients(actor, obs[:1], cont[:1], disc[:1], [1.0], cfg.variance_weight)
    _, g2 = actor_gradients(actor, obs[1:], cont[1:], disc[1:], [1.0], cfg.variance_weight)
    delta = sgd_delta(actor, batch_of(obs, cont, disc), np.array([1.0, -1.0]), cfg)
    for a, b, d in zip(g1, g2, delta):
        np.testing.assert_allclose(d, (math.e * a + b / math.e) / 2, rtol=1e-10, atol=1e-14)


def test_actor_gradients_match_finite_differences():
    _, actor = nets(seed=6)
    rng = np.random.default_rng(2)
    obs, cont, disc = rng.normal(size=(3, OBS)), rng.uniform(0, 1, (3, 2)), rng.integers(0, 3, (3, 1))
    w = np.array([0.5, 1.0, 2.0])
    _, grads = actor_gradients(actor, obs, cont, disc, w, variance_weight=0.0)
    from oracles import central_difference
    for p, g in zip(actor.params.arrays(), grads):
        num = central_difference(lambda: actor_gradients(actor, obs, cont, disc, w, 0.0)[0], p)
        np.testing.assert_allclose(g, num, rtol=1e-4, atol=1e-6)


def test_filtering_rejects_failure_rows():
    critic, actor = nets()
    b = batch_of(np.zeros((2, OBS)), np.zeros((2, 2)), np.zeros((2, 1)), success=False)
    with pytest.raises(UsageError):
        actor_update(actor, critic, b, make_algorithm("aw_opt"), nn.OptimizerState("sgd", 0.1),
                     np.random.default_rng(0))


def test_empty_batch_leaves_actor_unchanged():
    critic, actor = nets()
    before = actor.params.copy()
    b = batch_of(np.zeros((0, OBS)), np.zeros((0, 2)), np.zeros((0, 1)))
    actor_update(actor, critic, b, make_algorithm("aw_opt"), nn.OptimizerState("sgd", 0.1), np.random.default_rng(0))
    for a, c in zip(before.arrays(), actor.params.arrays()):
        np.testing.assert_array_equal(a, c)


# -- exploration -----------------------------------------------------------
def agent_for(kind, p):
    cfg = make_algorithm("aw_opt", exploration={"kind": kind, "p_critic": p}, hidden=(8,))
    return Agent(cfg, OBS, MIXED, np.random.default_rng(0))


def rollout_actions(agent, strategy, seed):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(5):
        flag = agent.begin_episode(rng)
        for _ in range(4):
            a, src = select_exploration_action(agent, np.ones(OBS), strategy, flag, rng)
            out.append((a.continuous.tobytes(), a.discrete.tobytes(), src))
    return out


@pytest.mark.parametrize("kind", ["episode_switch", "step_switch"])
def test_degenerate_coins_match_pure_strategies(kind):
    agent = agent_for("critic_only", 1.0)
    for seed in range(3):
        assert rollout_actions(agent, ExplorationStrategy(kind, 1.0), seed) == \
            rollout_actions(agent, ExplorationStrategy("critic_only", 1.0), seed)
        # begin_episode uses the agent's own p_critic; build one whose coin never picks the critic
        low = agent_for("actor_only", 0.0)
        assert rollout_actions(low, ExplorationStrategy(kind, 0.0), seed) == \
            rollout_actions(low, ExplorationStrategy("actor_only", 0.0), seed)


def test_episode_switch_fraction():
    agent = agent_for("episode_switch", 0.8)
    rng = np.random.default_rng(0)
    frac = np.mean([agent.begin_episode(rng) for _ in range(10_000)])
    assert abs(frac - 0.8) <= 0.01


# -- configs ---------------------------------------------------------------
def test_named_algorithms():
    aw = make_algorithm("aw_opt")
    assert aw.target_strategy == "max_q_actor_candidate"
    assert aw.positive_filtering and aw.balanced_critic
    assert (aw.exploration.kind, aw.exploration.p_critic) == ("episode_switch", 0.8)
    awac = make_algorithm("awac")
    assert awac.target_strategy == "awac_expectation" and awac.exploration.kind == "actor_only"
    qt = make_algorithm("qt_opt")
    assert qt.target_strategy == "max_q" and qt.exploration.kind == "critic_only" and not qt.positive_filtering
    assert not make_algorithm("aw_opt", positive_filtering=False).positive_filtering


def test_every_variant_builds_and_round_trips():
    for name in VARIANTS:
        cfg = make_algorithm(name)
        assert AgentConfig.from_dict(cfg.to_dict()) == cfg


def test_dotted_overrides():
    cfg = make_algorithm("aw_opt", **{"exploration.p_critic": 0.5, "cem.population": 32})
    assert cfg.exploration.p_critic == 0.5 and cfg.exploration.kind == "episode_switch"
    assert cfg.cem.population == 32


def test_contradictory_overrides():
    with pytest.raises(ConfigError):
        make_algorithm("qt_opt", exploration={"kind": "actor_only"})
    with pytest.raises(ConfigError):
        make_algorithm("qt_opt", target_strategy="max_q_actor_candidate")
    with pytest.raises(ConfigError):
        make_algorithm("aw_opt", adv_clip=0.5)
    with pytest.raises(ConfigError):
        make_algorithm("nope")
    with pytest.raises(ConfigError):
        AgentConfig.from_dict({"bogus": 1})
