"""Quickstart: clone positives, then finetune on the 1D reach task.

Takes well under a minute.  Run from the repository root:

    python demos/quickstart.py
"""
import numpy as np

from awopt.envs import ReachEnv, generate_dataset, scripted_policy
from awopt.experiment import ExperimentConfig, run_experiment

# %% A look at the task
# The agent sees [position, goal - position], moves by at most 0.2 per step
# and must press "terminate" within 0.05 of the goal.  Reward is 1 on a
# successful terminate and 0 everywhere else.
env = ReachEnv()
rng = np.random.default_rng(0)
demos = generate_dataset(env, scripted_policy(env, noise=0.5), 20, keep="all", rng=rng)
print("demo episodes:", len(demos), " successes:", sum(e.success for e in demos))
print("first transition:", demos[0].transitions[0])

# %% Offline pretraining, then online finetuning
# Only successful demonstrations reach the actor.  The critic sees
# everything, balanced half and half between successes and failures.
config = ExperimentConfig(
    env="reach",
    algorithm="aw_opt",
    data=[{"policy": "scripted", "episodes": 50, "keep": "all", "noise": 0.5}],
    pretrain_steps=300,
    online_episodes=40,
    grad_steps_per_episode=5,
    eval_every_episodes=10,
    eval_episodes=50,
    seed=0,
)
result = run_experiment(config)

for r in result.records:
    print(f"{r.phase:8s} step={r.step:5d} transitions={r.transitions:4d} success={r.success_rate:.2f}")

# %% What came out
s = result.summary()
print("after pretraining:", s["post_il_success"], " final:", s["final_success"])
print("actor action selection: %.3f ms" % s["action_select_ms"])
