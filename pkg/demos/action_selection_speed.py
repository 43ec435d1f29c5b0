"""Action selection cost: actor forward pass versus CEM over the critic.

    python demos/action_selection_speed.py
"""
import numpy as np

from awopt.agents import Agent, make_algorithm
from awopt.envs import NavEnv
from awopt.experiment import evaluate

env = NavEnv()
agent = Agent(make_algorithm("aw_opt"), env.observation_dim, env.action_spec, np.random.default_rng(0))

# %% Same networks, two ways to act
# The actor needs one forward pass.  CEM evaluates the critic on
# iterations x population candidates per action (3 x 64 by default).
_, actor_ms = evaluate(agent, env, 30, np.random.default_rng(1))
agent.config.eval_policy = "cem"
_, cem_ms = evaluate(agent, env, 30, np.random.default_rng(1))

print(f"actor: {actor_ms:.3f} ms/action")
print(f"CEM:   {cem_ms:.3f} ms/action")
print(f"ratio: {cem_ms / actor_ms:.1f}x (depends on hardware and network size)")
