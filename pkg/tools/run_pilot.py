"""Run the nav comparison protocol once per seed and record it in fixtures/pilot.json.

The acceptance suite gates its ordering checks against these numbers with a
10-point margin.  Rerun only when the algorithms or the protocol change.

    python tools/run_pilot.py [--out fixtures/pilot.json]
"""
from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from awopt.benchmarks import ABLATIONS, RANDOM_NEGATIVES, SEEDS, nav_config
from awopt.experiment import run_experiment

ONLINE = ("aw_opt", "awac", "qt_opt", *ABLATIONS)


def run(name: str, cfg) -> dict:
    t0 = time.perf_counter()
    result = run_experiment(cfg)
    row = {
        "name": name,
        "seed": cfg.seed,
        "success": [r.success_rate for r in result.records],
        "transitions": [r.transitions for r in result.records],
        "post_offline": result.post_offline_success,
        "final": result.final_success,
        "seconds": round(time.perf_counter() - t0, 1),
    }
    print(json.dumps(row), flush=True)
    return row


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "fixtures" / "pilot.json"))
    args = ap.parse_args()
    rows = []
    for seed in SEEDS:
        for algo in ONLINE:
            rows.append(run(algo, nav_config(algo, seed)))
        rows.append(run("qt_opt_random_negatives",
                        nav_config("qt_opt", seed, online_transitions=0, random_negatives=RANDOM_NEGATIVES)))
    Path(args.out).write_text(json.dumps({"protocol": "awopt.benchmarks", "runs": rows}, indent=1) + "\n")


if __name__ == "__main__":
    main()
