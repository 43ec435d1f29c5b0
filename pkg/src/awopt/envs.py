"""Sparse binary-reward environments and scripted data generators.

Two environments share one contract: ``reset(rng) -> obs`` and
``step(action) -> (obs, reward, done)``.  Reward is 1 only on the final step
of a successful episode and 0 everywhere else.  Dynamics are deterministic;
all randomness comes from ``reset`` and from the policies.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .actions import ActionSpec, ContinuousSubaction, DiscreteSubaction, MixedAction, uniform_random_action
from .errors import DataGenerationError, UsageError

BEHAVIOR_TAGS = ("demo", "scripted", "actor", "cem", "random")
KEEP_MODES = ("all", "positives_only", "negatives_only")


@dataclass
class Transition:
    obs: np.ndarray
    action: MixedAction
    reward: float
    next_obs: np.ndarray
    done: bool


@dataclass
class Episode:
    transitions: list[Transition] = field(default_factory=list)
    behavior_tag: str = "scripted"
    episode_id: int = 0

    @property
    def success(self) -> bool:
        return bool(self.transitions) and self.transitions[-1].reward == 1.0

    def __len__(self):
        return len(self.transitions)

    def validate(self) -> None:
        if not self.transitions:
            raise ValueError("empty episode")
        for t in self.transitions[:-1]:
            if t.reward != 0.0 or t.done:
                raise ValueError("non-final transition must have reward 0 and done=False")
        if self.transitions[-1].reward not in (0.0, 1.0):
            raise ValueError("reward must be binary")


class Env:
    """Common bookkeeping: horizon, done flag and a lifetime step counter."""

    name = "env"
    observation_dim: int
    action_spec: ActionSpec
    horizon: int

    def __init__(self):
        self.total_steps = 0
        self._done = True
        self._t = 0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: MixedAction) -> tuple[np.ndarray, float, bool]:
        if self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        self.total_steps += 1
        self._t += 1
        terminate = bool(action.discrete[self.terminate_index] == 1)
        if not terminate:
            self._move(action)
        done = terminate or self._t >= self.horizon
        reward = 1.0 if done and self._at_goal() else 0.0
        self._done = done
        return self.observe(), reward, done

    terminate_index = 0

    def _move(self, action: MixedAction) -> None:
        raise NotImplementedError

    def _at_goal(self) -> bool:
        raise NotImplementedError

    def observe(self) -> np.ndarray:
        raise NotImplementedError


@dataclass
class NavEnvState:
    x: float
    y: float
    heading: float
    goal: np.ndarray
    obstacles: list[tuple[float, float, float, float]] = field(default_factory=list)
    t: int = 0


def nav_action_spec(max_linear: float = 1.0, max_angular: float = 1.5) -> ActionSpec:
    return ActionSpec(
        (
            ContinuousSubaction("linear", 0.0, max_linear, 1.0),
            ContinuousSubaction("angular", -max_angular, max_angular, 1.0),
        ),
        (DiscreteSubaction("terminate", 2, 1.0),),
    )


def _ray_box_distance(ox, oy, dx, dy, box) -> np.ndarray:
    """Distance along unit rays to an axis-aligned box (inf where missed). Vectorized over rays."""
    xmin, ymin, xmax, ymax = box
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_x = np.where(dx != 0, 1.0 / dx, np.inf)
        inv_y = np.where(dy != 0, 1.0 / dy, np.inf)
        tx1, tx2 = (xmin - ox) * inv_x, (xmax - ox) * inv_x
        ty1, ty2 = (ymin - oy) * inv_y, (ymax - oy) * inv_y
    # rays parallel to an axis: inside the slab -> (-inf, inf), outside -> empty
    par_x = dx == 0
    par_y = dy == 0
    in_x = (xmin <= ox) & (ox <= xmax)
    in_y = (ymin <= oy) & (oy <= ymax)
    tx_lo = np.where(par_x, np.where(in_x, -np.inf, np.inf), np.minimum(tx1, tx2))
    tx_hi = np.where(par_x, np.where(in_x, np.inf, -np.inf), np.maximum(tx1, tx2))
    ty_lo = np.where(par_y, np.where(in_y, -np.inf, np.inf), np.minimum(ty1, ty2))
    ty_hi = np.where(par_y, np.where(in_y, np.inf, -np.inf), np.maximum(ty1, ty2))
    t_near = np.maximum(tx_lo, ty_lo)
    t_far = np.minimum(tx_hi, ty_hi)
    hit = (t_near <= t_far) & (t_far >= 0)
    return np.where(hit, np.maximum(t_near, 0.0), np.inf)


def _segment_point_distance(p, a, b) -> float:
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + s * ab)))


def _segment_box_distance(a, b, box, samples: int = 32) -> float:
    xmin, ymin, xmax, ymax = box
    best = np.inf
    for s in np.linspace(0.0, 1.0, samples):
        p = a + s * (b - a)
        dx = max(xmin - p[0], 0.0, p[0] - xmax)
        dy = max(ymin - p[1], 0.0, p[1] - ymax)
        best = min(best, math.hypot(dx, dy))
    return best


class NavEnv(Env):
    """Point-to-point navigation in a square arena from range readings.

    Observation: ``n_rays`` ray distances (normalized by the arena diagonal)
    followed by the goal position in the robot frame.  Action: a twist
    ``(linear, angular)`` and a binary terminate flag.
    """

    name = "nav"
    terminate_index = 0

    def __init__(
        self,
        n_rays: int = 24,
        arena: float = 4.0,
        max_obstacles: int = 3,
        success_radius: float = 0.2,
        horizon: int = 50,
        dt: float = 1.0,
        max_linear: float = 1.0,
        max_angular: float = 1.5,
        min_goal_distance: float = 0.5,
        margin: float = 0.3,
    ):
        super().__init__()
        self.n_rays = n_rays
        self.arena = arena
        self.max_obstacles = max_obstacles
        self.success_radius = success_radius
        self.horizon = horizon
        self.dt = dt
        self.min_goal_distance = min_goal_distance
        self.margin = margin
        self.max_range = arena * math.sqrt(2.0)
        self.observation_dim = n_rays + 2
        self.action_spec = nav_action_spec(max_linear, max_angular)
        self.ray_offsets = 2.0 * np.pi * np.arange(n_rays) / n_rays
        self.state: NavEnvState | None = None

    # -- reset -------------------------------------------------------------
    def reset(self, rng: np.random.Generator) -> np.ndarray:
        lo, hi = self.margin, self.arena - self.margin
        pos = rng.uniform(lo, hi, size=2)
        goal = rng.uniform(lo, hi, size=2)
        while np.linalg.norm(goal - pos) < self.min_goal_distance:
            goal = rng.uniform(lo, hi, size=2)
        heading = rng.uniform(-np.pi, np.pi)
        obstacles = []
        for _ in range(int(rng.integers(0, self.max_obstacles + 1))):
            box = self._sample_obstacle(rng, pos, goal)
            if box is not None:
                obstacles.append(box)
        return self.reset_to(pos[0], pos[1], heading, goal, obstacles)

    def _sample_obstacle(self, rng, pos, goal, attempts: int = 20):
        for _ in range(attempts):
            c = rng.uniform(0.0, self.arena, size=2)
            half = rng.uniform(0.1, 0.3, size=2)
            box = (c[0] - half[0], c[1] - half[1], c[0] + half[0], c[1] + half[1])
            # keep the straight start-goal corridor free
            if _segment_box_distance(pos, goal, box) > 0.3:
                return box
        return None

    def reset_to(self, x, y, heading, goal, obstacles=()) -> np.ndarray:
        self.state = NavEnvState(float(x), float(y), float(heading), np.asarray(goal, dtype=np.float64),
                                 [tuple(map(float, b)) for b in obstacles])
        self._t = 0
        self._done = False
        return self.observe()

    # -- dynamics ----------------------------------------------------------
    def _blocked(self, p: np.ndarray) -> bool:
        for xmin, ymin, xmax, ymax in self.state.obstacles:
            if xmin <= p[0] <= xmax and ymin <= p[1] <= ymax:
                return True
        return False

    def _move(self, action: MixedAction) -> None:
        s = self.state
        spec = self.action_spec
        v, w = np.clip(action.continuous, spec.low, spec.high)
        start = np.array([s.x, s.y])
        end = start + v * self.dt * np.array([math.cos(s.heading), math.sin(s.heading)])
        end = np.clip(end, 0.0, self.arena)
        if s.obstacles and any(self._blocked(start + f * (end - start)) for f in np.linspace(0.1, 1.0, 10)):
            end = start
        s.x, s.y = float(end[0]), float(end[1])
        s.heading = float((s.heading + w * self.dt + np.pi) % (2.0 * np.pi) - np.pi)
        s.t = self._t

    def goal_distance(self) -> float:
        s = self.state
        return float(math.hypot(s.goal[0] - s.x, s.goal[1] - s.y))

    def _at_goal(self) -> bool:
        return self.goal_distance() <= self.success_radius

    # -- observation -------------------------------------------------------
    def lidar(self) -> np.ndarray:
        s = self.state
        ang = s.heading + self.ray_offsets
        dx, dy = np.cos(ang), np.sin(ang)
        dist = self._wall_distance(s.x, s.y, dx, dy)
        for box in s.obstacles:
            dist = np.minimum(dist, _ray_box_distance(s.x, s.y, dx, dy, box))
        return np.minimum(dist, self.max_range) / self.max_range

    def _wall_distance(self, x, y, dx, dy) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            tx = np.where(dx > 0, (self.arena - x) / dx, np.where(dx < 0, -x / dx, np.inf))
            ty = np.where(dy > 0, (self.arena - y) / dy, np.where(dy < 0, -y / dy, np.inf))
        return np.minimum(tx, ty)

    def goal_in_robot_frame(self) -> np.ndarray:
        s = self.state
        dx, dy = s.goal[0] - s.x, s.goal[1] - s.y
        c, sn = math.cos(s.heading), math.sin(s.heading)
        return np.array([c * dx + sn * dy, -sn * dx + c * dy])

    def observe(self) -> np.ndarray:
        return np.concatenate([self.lidar(), self.goal_in_robot_frame()])


class ReachEnv(Env):
    """1D reach: move a point to a goal on [0, 1] and press terminate.

    Observation ``[position, goal - position]``; continuous action is a
    bounded position delta.
    """

    name = "reach"
    terminate_index = 0

    def __init__(self, max_delta: float = 0.2, success_radius: float = 0.05, horizon: int = 10,
                 min_goal_distance: float = 0.2):
        super().__init__()
        self.max_delta = max_delta
        self.success_radius = success_radius
        self.horizon = horizon
        self.min_goal_distance = min_goal_distance
        self.observation_dim = 2
        self.action_spec = ActionSpec(
            (ContinuousSubaction("delta", -max_delta, max_delta, 1.0),),
            (DiscreteSubaction("terminate", 2, 1.0),),
        )
        self.x = 0.0
        self.goal = 0.0

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        x, goal = rng.uniform(0.0, 1.0, size=2)
        while abs(goal - x) < self.min_goal_distance:
            x, goal = rng.uniform(0.0, 1.0, size=2)
        return self.reset_to(x, goal)

    def reset_to(self, x: float, goal: float) -> np.ndarray:
        self.x, self.goal = float(x), float(goal)
        self._t = 0
        self._done = False
        return self.observe()

    def _move(self, action: MixedAction) -> None:
        d = float(np.clip(action.continuous[0], -self.max_delta, self.max_delta))
        self.x = float(np.clip(self.x + d, 0.0, 1.0))

    def _at_goal(self) -> bool:
        return abs(self.goal - self.x) <= self.success_radius

    def observe(self) -> np.ndarray:
        return np.array([self.x, self.goal - self.x])


ENVS = {"nav": NavEnv, "reach": ReachEnv}


def make_env(name: str, **kwargs) -> Env:
    try:
        return ENVS[name](**kwargs)
    except KeyError:
        raise UsageError(f"unknown env {name!r}; choose from {sorted(ENVS)}") from None


# -- scripted policies -----------------------------------------------------
Policy = Callable[[np.ndarray, np.random.Generator], MixedAction]


def scripted_nav_policy(observation, noise: float = 0.0, rng: np.random.Generator | None = None,
                        env: NavEnv | None = None) -> MixedAction:
    """Turn toward the goal, drive at it, terminate inside the success radius.

    ``noise`` perturbs the twist (Gaussian, scaled to half the action range)
    and the distance estimate used for the terminate decision.
    """
    env = env or NavEnv()
    spec = env.action_spec
    gx, gy = observation[-2], observation[-1]
    dist = math.hypot(gx, gy)
    bearing = math.atan2(gy, gx)
    w = float(np.clip(bearing / env.dt, spec.low[1], spec.high[1]))
    v = min(dist / env.dt, spec.high[0]) * max(math.cos(bearing), 0.0) ** 2
    cont = np.array([v, w])
    est = dist
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        cont = cont + noise * 0.5 * (spec.high - spec.low) * rng.standard_normal(2)
        est = dist + noise * 0.2 * rng.standard_normal()
    cont = np.clip(cont, spec.low, spec.high)
    terminate = int(est < env.success_radius)
    return MixedAction(cont, [terminate])


def scripted_reach_policy(observation, noise: float = 0.0, rng: np.random.Generator | None = None,
                          env: ReachEnv | None = None) -> MixedAction:
    env = env or ReachEnv()
    gap = float(observation[1])
    d = gap
    est = abs(gap)
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng()
        d = d + noise * env.max_delta * rng.standard_normal()
        est = est + noise * 0.05 * rng.standard_normal()
    d = float(np.clip(d, -env.max_delta, env.max_delta))
    return MixedAction([d], [int(est < env.success_radius)])


def scripted_policy(env: Env, noise: float = 0.0) -> Policy:
    if isinstance(env, NavEnv):
        return lambda obs, rng: scripted_nav_policy(obs, noise, rng, env)
    if isinstance(env, ReachEnv):
        return lambda obs, rng: scripted_reach_policy(obs, noise, rng, env)
    raise UsageError(f"no scripted policy for {type(env).__name__}")


def random_policy(env: Env) -> Policy:
    spec = env.action_spec
    return lambda obs, rng: uniform_random_action(spec, rng)


# -- rollouts and datasets -------------------------------------------------
def rollout(env: Env, policy: Policy, rng: np.random.Generator, behavior_tag: str = "scripted",
            episode_id: int = 0) -> Episode:
    obs = env.reset(rng)
    ep = Episode(behavior_tag=behavior_tag, episode_id=episode_id)
    done = False
    while not done:
        action = policy(obs, rng)
        next_obs, reward, done = env.step(action)
        ep.transitions.append(Transition(obs, action, reward, next_obs, done))
        obs = next_obs
    return ep


def generate_dataset(env: Env, policy: Policy, episodes: int, keep: str = "all",
                     rng: np.random.Generator | None = None, behavior_tag: str = "scripted",
                     first_id: int = 0) -> list[Episode]:
    """Roll out ``policy`` until ``episodes`` episodes pass the ``keep`` filter."""
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    if keep not in KEEP_MODES:
        raise UsageError(f"keep must be one of {KEEP_MODES}")
    rng = rng if rng is not None else np.random.default_rng()
    out: list[Episode] = []
    attempts = 0
    while len(out) < episodes:
        if attempts >= 100 * episodes:
            raise DataGenerationError(
                f"only {len(out)} of {episodes} episodes passed keep={keep} after {attempts} rollouts")
        ep = rollout(env, policy, rng, behavior_tag, first_id + len(out))
        attempts += 1
        if keep == "positives_only" and not ep.success:
            continue
        if keep == "negatives_only" and ep.success:
            continue
        out.append(ep)
    return out


# -- JSONL -----------------------------------------------------------------
def episodes_to_jsonl(episodes: Iterable[Episode], path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as f:
        for ep in episodes:
            for step, t in enumerate(ep.transitions):
                f.write(json.dumps({
                    "episode_id": ep.episode_id,
                    "step": step,
                    "behavior_tag": ep.behavior_tag,
                    "observation": t.obs.tolist(),
                    "action": t.action.to_dict(),
                    "reward": t.reward,
                    "next_observation": t.next_obs.tolist(),
                    "done": t.done,
                }) + "\n")
                n += 1
    return n


def episodes_from_jsonl(path) -> list[Episode]:
    episodes: dict[tuple, Episode] = {}
    order = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            row = json.loads(line)
            key = (row["episode_id"], row["behavior_tag"])
            if key not in episodes:
                episodes[key] = Episode(behavior_tag=row["behavior_tag"], episode_id=row["episode_id"])
                order.append(key)
            obs = np.asarray(row["observation"], dtype=np.float64)
            nxt = row.get("next_observation")
            episodes[key].transitions.append(Transition(
                obs, MixedAction.from_dict(row["action"]), float(row["reward"]),
                np.asarray(nxt, dtype=np.float64) if nxt is not None else obs.copy(), bool(row["done"])))
    return [episodes[k] for k in order]


def load_episodes(paths: Iterable) -> list[Episode]:
    out = []
    for p in paths:
        out += episodes_from_jsonl(Path(p))
    return out
