"""Offline-to-online comparison on the navigation task, one seed.

Runs the shared benchmark protocol (noisy positive-only demonstrations,
offline pretraining, then a fixed budget of online transitions) for QT-Opt,
AWAC and AW-Opt and prints the learning curves side by side.  Expect around
ten minutes on one core.

    python demos/offline_to_online.py [seed]
"""
import sys

from awopt.benchmarks import nav_config
from awopt.experiment import run_experiment

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0

# %% One run per algorithm under the same protocol
curves = {}
for algo in ("qt_opt", "awac", "aw_opt"):
    result = run_experiment(nav_config(algo, seed))
    curves[algo] = result.records
    print(f"{algo:7s} post-offline {result.post_offline_success:.2f} -> final {result.final_success:.2f}")

# %% Success against collected transitions
# QT-Opt has only successes to learn from offline, so its critic never sees a
# failure and its CEM policy is close to random.  The two actor-based
# methods start from a cloned policy and improve from there.
for algo, records in curves.items():
    print(algo)
    for r in records:
        bar = "#" * int(round(40 * r.success_rate))
        print(f"  {r.transitions:5d} {r.success_rate:4.2f} {bar}")
