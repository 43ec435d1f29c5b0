"""Command-line front end: ``awopt <command> [flags]``.

Commands: generate-data, train, evaluate, ablation-matrix, summarize.
Exit codes: 0 success, 2 usage or config error, 3 numeric failure,
4 partial failure inside an ablation matrix.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .envs import episodes_to_jsonl, generate_dataset, make_env, random_policy, scripted_policy
from .errors import AwoptError, ConfigError, NumericError, UsageError
from .experiment import (
    ExperimentConfig,
    evaluate,
    load_checkpoint,
    read_metrics_csv,
    run_experiment,
    transitions_to_threshold,
)

log = logging.getLogger("awopt")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_PARTIAL = 0, 2, 3, 4
KEEP_ALIASES = {"positives": "positives_only", "negatives": "negatives_only", "all": "all",
                "positives_only": "positives_only", "negatives_only": "negatives_only"}
SPLIT_RATIOS = ((20, 80), (50, 50), (60, 40), (70, 30), (80, 20), (90, 10))  # critic % / actor %
SUMMARY_COLUMNS = ("variant", "seeds", "ok_runs", "post_il_success", "final_success",
                   "transitions_to_threshold", "action_select_ms", "error")


# -- config handling ---------------------------------------------------------
def parse_value(text: str):
    """Parse a TOML scalar/array; anything that is not valid TOML is kept as a string."""
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(d: dict, assignment: str) -> None:
    """Apply ``key=value`` to a raw experiment dict.

    Keys naming experiment fields set them directly; everything else is an
    agent override (dotted paths allowed, optional ``overrides.`` prefix).
    """
    if "=" not in assignment:
        raise UsageError(f"override {assignment!r} is not key=value")
    key, text = assignment.split("=", 1)
    key, value = key.strip(), parse_value(text.strip())
    top = key.split(".")[0]
    if top in ExperimentConfig.__dataclass_fields__ and top != "overrides":
        if "." in key:
            cur = d.setdefault(top, {})
            for part in key.split(".")[1:-1]:
                cur = cur.setdefault(part, {})
            cur[key.split(".")[-1]] = value
        else:
            d[key] = value
        return
    if top == "overrides":
        key = key.split(".", 1)[1]
    d.setdefault("overrides", {})[key] = value


def validate_config(d: dict) -> ExperimentConfig:
    """Build an ExperimentConfig, reporting problems with their field path."""
    known = ExperimentConfig.__dataclass_fields__
    for k in d:
        if k not in known:
            raise ConfigError(f"config.{k}: unknown field")
    types = {"env": str, "algorithm": str, "overrides": dict, "env_kwargs": dict, "data": list,
             "pretrain_steps": int, "online_episodes": int, "online_transitions": int,
             "grad_steps_per_episode": int, "eval_every_steps": int, "eval_every_episodes": int,
             "eval_episodes": int, "seed": int, "buffer_capacity": int}
    for k, t in types.items():
        if k in d and (not isinstance(d[k], t) or isinstance(d[k], bool) and t is int):
            raise ConfigError(f"config.{k}: expected {t.__name__}, got {type(d[k]).__name__}")
    for i, src in enumerate(d.get("data", [])):
        if not isinstance(src, dict) or not ("path" in src or "episodes" in src):
            raise ConfigError(f"config.data[{i}]: needs 'path' or 'episodes'")
    try:
        cfg = ExperimentConfig.from_dict(d)
    except ConfigError as e:
        raise ConfigError(f"config: {e}") from e
    try:
        cfg.agent_config()
    except ConfigError as e:
        raise ConfigError(f"config.overrides: {e}") from e
    try:
        make_env(cfg.env, **cfg.env_kwargs)
    except (TypeError, UsageError) as e:
        raise ConfigError(f"config.env: {e}") from e
    return cfg


def load_config_dict(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.exists():
        raise UsageError(f"config file {path} not found")
    try:
        with open(p, "rb") as f:
            return tomli.load(f)
    except tomli.TOMLDecodeError as e:
        raise ConfigError(f"{path}: {e}") from e


def canonical_hash(d: dict) -> str:
    blob = json.dumps(d, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(blob.encode()).hexdigest()


def out_root(flag: str | None) -> Path:
    if flag:
        return Path(flag)
    return Path(os.environ.get("AWOPT_OUT_DIR", "runs"))


def write_manifest(out_dir: Path, cfg: ExperimentConfig, started: str, extra: dict | None = None) -> None:
    d = cfg.to_dict()
    manifest = {
        "config": d,
        "config_hash": canonical_hash(d),
        "seeds": {"seed": cfg.seed, "eval_seed": cfg.eval_seed},
        "output_dir": str(out_dir),
        "version": f"awopt {__version__}",
        "started": started,
        "finished": _now(),
    }
    manifest.update(extra or {})
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- commands ----------------------------------------------------------------
def cmd_generate_data(args) -> int:
    if args.episodes < 1:
        raise UsageError("--episodes must be >= 1")
    env = make_env(args.env)
    policy = random_policy(env) if args.policy == "random" else scripted_policy(env, args.noise)
    tag = args.tag or ("random" if args.policy == "random" else "demo")
    out = Path(args.out) if args.out else out_root(None) / "data" / f"{args.env}_{args.keep}_s{args.seed}.jsonl"
    try:
        out.parent.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise UsageError(f"cannot create {out.parent}: {e}") from e
    eps = generate_dataset(env, policy, args.episodes, KEEP_ALIASES[args.keep], np.random.default_rng(args.seed), tag)
    try:
        n = episodes_to_jsonl(eps, out)
    except OSError as e:
        raise UsageError(f"cannot write {out}: {e}") from e
    pos = sum(e.success for e in eps)
    print(json.dumps({"path": str(out), "episodes": len(eps), "positives": pos,
                      "negatives": len(eps) - pos, "transitions": n}))
    return EXIT_OK


def build_train_config(args) -> ExperimentConfig:
    d = load_config_dict(args.config)
    if args.algo:
        d["algorithm"] = args.algo
    if args.data:
        d["data"] = [{"path": p} for p in args.data]
    if args.seed is not None:
        d["seed"] = args.seed
    for a in args.override or []:
        apply_override(d, a)
    return validate_config(d)


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    started = _now()
    out_dir = Path(args.out) if args.out else out_root(None) / f"{cfg.algorithm}_seed{cfg.seed}"
    out_dir.mkdir(parents=True, exist_ok=True)
    result = run_experiment(cfg, out_dir=out_dir)
    write_manifest(out_dir, cfg, started)
    s = result.summary()
    print(json.dumps({"out": str(out_dir), "post_il_success": s["post_il_success"],
                      "final_success": s["final_success"], "transitions": s["transitions"]}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    manifest_path = run / "manifest.json"
    ckpt = run / "checkpoint" if (run / "checkpoint").exists() else run
    if not (ckpt / "agent.json").exists():
        raise UsageError(f"no checkpoint under {run}")
    env_name, env_kwargs = args.env, {}
    if manifest_path.exists() and env_name is None:
        cfg = json.loads(manifest_path.read_text())["config"]
        env_name, env_kwargs = cfg["env"], cfg.get("env_kwargs", {})
    env = make_env(env_name or "nav", **env_kwargs)
    agent = load_checkpoint(ckpt, env.observation_dim, env.action_spec)
    if args.policy:
        if agent.config.algorithm == "qt_opt" and args.policy == "actor":
            log.warning("qt_opt's actor is auxiliary; evaluating it anyway")
        agent.config.eval_policy = args.policy
    rate, ms = evaluate(agent, env, args.episodes, np.random.default_rng(args.seed))
    print(json.dumps({"success_rate": rate, "action_select_ms": ms, "episodes": args.episodes,
                      "policy": agent.config.eval_policy}))
    return EXIT_OK


def matrix_variants(args) -> list[dict]:
    """Each variant is ``{"name", "algorithm", "overrides"}``."""
    variants: list[dict] = []
    if args.matrix == "exploration":
        for kind in ("actor_only", "critic_only", "episode_switch", "step_switch"):
            p = {"actor_only": 0.0, "critic_only": 1.0}.get(kind, 0.8)
            variants.append({"name": kind, "algorithm": "aw_opt",
                             "overrides": {"exploration": {"kind": kind, "p_critic": p}}})
    elif args.matrix == "split":
        for critic, actor in SPLIT_RATIOS:
            variants.append({"name": f"{critic}/{actor}", "algorithm": "aw_opt",
                             "overrides": {"exploration": {"kind": "episode_switch", "p_critic": critic / 100}}})
    elif args.matrix == "targets":
        for t in ("awac_expectation", "max_q", "max_q_actor_mean", "max_q_actor_candidate"):
            variants.append({"name": t, "algorithm": "aw_opt", "overrides": {"target_strategy": t}})
    elif args.matrix == "ablations":
        for name in ("aw_opt", "aw_opt_no_positive_filtering", "aw_opt_no_actor_candidate",
                     "aw_opt_no_hybrid_exploration"):
            variants.append({"name": name, "algorithm": name, "overrides": {}})
    if args.matrix_file:
        spec = load_config_dict(args.matrix_file)
        for i, v in enumerate(spec.get("variant", [])):
            if "name" not in v:
                raise ConfigError(f"matrix.variant[{i}]: missing name")
            variants.append({"name": v["name"], "algorithm": v.get("algorithm", "aw_opt"),
                             "overrides": v.get("overrides", {})})
    for name in args.variant or []:
        variants.append({"name": name, "algorithm": name, "overrides": {}})
    if not variants:
        raise UsageError("the ablation matrix is empty; pass --matrix, --matrix-file or --variant")
    return variants


def _mean(xs):
    xs = [x for x in xs if x is not None and not (isinstance(x, float) and math.isnan(x))]
    return float(np.mean(xs)) if xs else float("nan")


def cmd_ablation_matrix(args) -> int:
    base = load_config_dict(args.config)
    for a in args.override or []:
        apply_override(base, a)
    variants = matrix_variants(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not seeds:
        raise UsageError("--seeds is empty")
    root = out_root(args.out)
    root.mkdir(parents=True, exist_ok=True)
    rows, failed = [], False
    for v in variants:
        summaries, errors = [], []
        for seed in seeds:
            d = json.loads(json.dumps(base))
            d["algorithm"] = v["algorithm"]
            d["seed"] = seed
            merged = dict(d.get("overrides", {}))
            merged.update(v["overrides"])
            d["overrides"] = merged
            safe = v["name"].replace("/", "_")
            out_dir = root / safe / f"seed{seed}"
            try:
                cfg = validate_config(d)
                started = _now()
                out_dir.mkdir(parents=True, exist_ok=True)
                result = run_experiment(cfg, out_dir=out_dir)
                write_manifest(out_dir, cfg, started, {"variant": v["name"]})
                summaries.append(result.summary(args.threshold))
            except (AwoptError, ValueError) as e:
                errors.append(f"seed {seed}: {e}")
                log.error("variant %s seed %d failed: %s", v["name"], seed, e)
        failed |= bool(errors)
        rows.append({
            "variant": v["name"],
            "seeds": ";".join(map(str, seeds)),
            "ok_runs": len(summaries),
            "post_il_success": _mean([s["post_il_success"] for s in summaries]),
            "final_success": _mean([s["final_success"] for s in summaries]),
            "transitions_to_threshold": _mean([s["transitions_to_threshold"] for s in summaries]),
            "action_select_ms": _mean([s["action_select_ms"] for s in summaries]),
            "error": " | ".join(errors),
        })
    summary_path = root / "summary.csv"
    write_rows(rows, summary_path, SUMMARY_COLUMNS)
    print(json.dumps({"summary": str(summary_path), "variants": len(rows), "failed": failed}))
    return EXIT_PARTIAL if failed else EXIT_OK


def write_rows(rows: list[dict], path: Path, columns) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})


def cmd_summarize(args) -> int:
    runs = []
    for p in args.runs:
        p = Path(p)
        runs += sorted(m.parent for m in p.rglob("metrics.csv")) if p.is_dir() else []
    if not runs:
        raise UsageError("no metrics.csv found under the given paths")
    rows = []
    for run in runs:
        records = read_metrics_csv(run / "metrics.csv")
        offline = [r for r in records if r.phase == "offline"]
        online = [r for r in records if r.phase == "online"]
        final = records[-1].success_rate
        thr = args.threshold if args.threshold is not None else final
        rows.append({
            "run": str(run),
            "post_il_success": offline[-1].success_rate if offline else float("nan"),
            "final_success": final,
            "transitions": records[-1].transitions,
            "transitions_to_threshold": transitions_to_threshold(online, thr) if online else "",
        })
    cols = ("run", "post_il_success", "final_success", "transitions", "transitions_to_threshold")
    if args.out:
        write_rows(rows, Path(args.out), cols)
    else:
        w = csv.DictWriter(sys.stdout, fieldnames=list(cols), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    return EXIT_OK


# -- entry point -------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="awopt", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="roll out a scripted or random policy to JSONL")
    g.add_argument("--env", default="nav")
    g.add_argument("--episodes", type=int, required=True)
    g.add_argument("--keep", choices=sorted(KEEP_ALIASES), default="all")
    g.add_argument("--policy", choices=("scripted", "random"), default="scripted")
    g.add_argument("--noise", type=float, default=0.0)
    g.add_argument("--tag", default=None)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", default=None)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="offline pretraining then online finetuning")
    t.add_argument("--config", default=None, help="TOML experiment config")
    t.add_argument("--algo", default=None)
    t.add_argument("--data", action="append", help="JSONL episode file (repeatable)")
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--override", action="append", metavar="KEY=VALUE")
    t.add_argument("--out", default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a saved run or checkpoint")
    e.add_argument("--run", required=True)
    e.add_argument("--env", default=None)
    e.add_argument("--episodes", type=int, default=100)
    e.add_argument("--policy", choices=("actor", "cem"), default=None)
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=cmd_evaluate)

    m = sub.add_parser("ablation-matrix", help="run variants x seeds and write summary.csv")
    m.add_argument("--matrix", choices=("exploration", "split", "targets", "ablations"), default=None)
    m.add_argument("--matrix-file", default=None, help="TOML with [[variant]] tables")
    m.add_argument("--variant", action="append", help="named algorithm variant (repeatable)")
    m.add_argument("--config", default=None)
    m.add_argument("--override", action="append", metavar="KEY=VALUE")
    m.add_argument("--seeds", default="0,1,2")
    m.add_argument("--threshold", type=float, default=None)
    m.add_argument("--out", default=None)
    m.set_defaults(func=cmd_ablation_matrix)

    s = sub.add_parser("summarize", help="collect metrics.csv files into one CSV")
    s.add_argument("runs", nargs="+")
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--out", default=None)
    s.set_defaults(func=cmd_summarize)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericError as e:
        print(f"numeric error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except AwoptError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
