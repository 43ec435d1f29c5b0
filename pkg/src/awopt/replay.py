"""Replay storage split by episode outcome.

Transitions from successful episodes live in the positive partition and
everything else in the negative partition.  The critic samples half of each
batch from each side; the actor samples from the positive side only.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .actions import ActionSpec
from .envs import Episode
from .errors import EmptyBufferError, UsageError

_FIELDS = ("obs", "cont", "disc", "reward", "next_obs", "done", "success", "tid", "episode_id")


class _Partition:
    """FIFO ring of transitions backed by growable numpy arrays."""

    def __init__(self, obs_dim: int, n_cont: int, n_disc: int, capacity: int):
        self.capacity = capacity
        self._shapes = {
            "obs": ((obs_dim,), np.float64), "cont": ((n_cont,), np.float64), "disc": ((n_disc,), np.int64),
            "reward": ((), np.float64), "next_obs": ((obs_dim,), np.float64), "done": ((), bool),
            "success": ((), bool), "tid": ((), np.int64), "episode_id": ((), np.int64),
        }
        self._alloc = min(capacity, 1024)
        self.data = {k: np.zeros((self._alloc,) + s, dtype=t) for k, (s, t) in self._shapes.items()}
        self.size = 0
        self.head = 0  # next write slot once full

    def __len__(self):
        return self.size

    def _grow(self):
        new = min(self.capacity, self._alloc * 2)
        for k, arr in self.data.items():
            grown = np.zeros((new,) + arr.shape[1:], dtype=arr.dtype)
            grown[:self._alloc] = arr
            self.data[k] = grown
        self._alloc = new

    def add(self, row: dict) -> None:
        if self.size < self.capacity:
            if self.size == self._alloc:
                self._grow()
            slot = self.size
            self.size += 1
        else:
            slot = self.head
            self.head = (self.head + 1) % self.capacity
        for k, v in row.items():
            self.data[k][slot] = v

    def ordered_slots(self) -> np.ndarray:
        """Slots from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.head) % self.capacity

    def take(self, idx: np.ndarray) -> dict:
        return {k: v[idx] for k, v in self.data.items()}


@dataclass
class Batch:
    obs: np.ndarray
    cont: np.ndarray
    disc: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    success: np.ndarray
    tid: np.ndarray
    episode_id: np.ndarray
    source_mix: tuple[int, int]

    def __len__(self):
        return len(self.reward)

    @classmethod
    def concat(cls, parts: list[dict], source_mix: tuple[int, int]) -> "Batch":
        fields = {k: np.concatenate([p[k] for p in parts]) for k in _FIELDS}
        return cls(**fields, source_mix=source_mix)


class ReplayBuffer:
    def __init__(self, obs_dim: int, spec: ActionSpec, capacity: int = 200_000):
        self.obs_dim = obs_dim
        self.spec = spec
        self.capacity = capacity
        self.positive = _Partition(obs_dim, spec.n_cont, spec.n_disc, capacity)
        self.negative = _Partition(obs_dim, spec.n_cont, spec.n_disc, capacity)
        self.inserted = 0
        self.inserted_episodes = 0

    def __len__(self):
        return len(self.positive) + len(self.negative)

    def insert_episode(self, episode: Episode) -> None:
        part = self.positive if episode.success else self.negative
        for t in episode.transitions:
            part.add({
                "obs": t.obs, "cont": t.action.continuous, "disc": t.action.discrete,
                "reward": t.reward, "next_obs": t.next_obs, "done": t.done,
                "success": episode.success, "tid": self.inserted, "episode_id": episode.episode_id,
            })
            self.inserted += 1
        self.inserted_episodes += 1

    def insert_episodes(self, episodes) -> None:
        for ep in episodes:
            self.insert_episode(ep)

    def _draw(self, part: _Partition, n: int, rng: np.random.Generator) -> dict:
        return part.take(rng.integers(0, len(part), size=n))

    def sample_critic_batch(self, batch_size: int, rng: np.random.Generator, balanced: bool = True) -> Batch:
        """Half positives (rounded up), half negatives; falls back to one side when the other is empty."""
        if batch_size < 1:
            raise UsageError("batch_size must be >= 1")
        n_pos_avail, n_neg_avail = len(self.positive), len(self.negative)
        if n_pos_avail == 0 and n_neg_avail == 0:
            raise EmptyBufferError("replay buffer is empty")
        if not balanced:
            return self.sample_uniform(batch_size, rng)
        if n_neg_avail == 0:
            n_pos = batch_size
        elif n_pos_avail == 0:
            n_pos = 0
        else:
            n_pos = math.ceil(batch_size / 2)
        n_neg = batch_size - n_pos
        parts = []
        if n_pos:
            parts.append(self._draw(self.positive, n_pos, rng))
        if n_neg:
            parts.append(self._draw(self.negative, n_neg, rng))
        return Batch.concat(parts, (n_pos, n_neg))

    def sample_uniform(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform over all stored transitions regardless of outcome."""
        n_p, n_n = len(self.positive), len(self.negative)
        if n_p + n_n == 0:
            raise EmptyBufferError("replay buffer is empty")
        idx = rng.integers(0, n_p + n_n, size=batch_size)
        pos_idx, neg_idx = idx[idx < n_p], idx[idx >= n_p] - n_p
        parts = [self.positive.take(pos_idx), self.negative.take(neg_idx)]
        return Batch.concat(parts, (len(pos_idx), len(neg_idx)))

    def sample_actor_batch(self, batch_size: int, rng: np.random.Generator, granularity: str = "episode") -> Batch:
        """Success-filtered batch.

        ``granularity="episode"`` keeps every transition of a successful
        episode; ``"reward"`` keeps only transitions whose own reward is 1.
        """
        if granularity == "episode":
            if len(self.positive) == 0:
                raise EmptyBufferError("no successful transitions to sample")
            return Batch.concat([self._draw(self.positive, batch_size, rng)], (batch_size, 0))
        if granularity == "reward":
            slots = np.flatnonzero(self.positive.data["reward"][:len(self.positive)] == 1.0)
            if slots.size == 0:
                raise EmptyBufferError("no reward-1 transitions to sample")
            return Batch.concat([self.positive.take(rng.choice(slots, size=batch_size))], (batch_size, 0))
        raise UsageError(f"unknown granularity {granularity!r}")

    def partition_rows(self, which: str) -> dict:
        part = self.positive if which == "positive" else self.negative
        return part.take(part.ordered_slots())
