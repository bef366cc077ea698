"""Ring replay buffer with episode-aware k-step pair sampling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ReplayError(RuntimeError):
    pass


@dataclass
class Batch:
    obs: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_obs: np.ndarray
    dones: np.ndarray
    ks: np.ndarray
    indices: np.ndarray


class ReplayBuffer:
    """Transitions ``(obs, action, reward, next_obs, terminal)`` tagged with an episode id.

    A transition ending an episode (goal or truncation) closes that episode id; the next
    transition starts a fresh one, so k-step pairs never straddle a boundary.
    """

    def __init__(self, capacity: int, obs_dim: int):
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.next_obs = np.zeros((capacity, obs_dim), dtype=np.float32)
        self.actions = np.zeros(capacity, dtype=np.int64)
        self.rewards = np.zeros(capacity, dtype=np.float64)
        self.dones = np.zeros(capacity, dtype=np.float64)
        self.episode = np.zeros(capacity, dtype=np.int64)
        self.ptr = 0
        self.size = 0
        self.current_episode = 0

    def __len__(self) -> int:
        return self.size

    def add(self, obs, action: int, reward: float, next_obs, terminal: bool, episode_end: bool) -> int:
        i = self.ptr
        self.obs[i] = obs
        self.next_obs[i] = next_obs
        self.actions[i] = action
        self.rewards[i] = reward
        self.dones[i] = float(terminal)
        self.episode[i] = self.current_episode
        if episode_end or terminal:
            self.current_episode += 1
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        return i

    def chronological(self) -> np.ndarray:
        """Storage indices ordered oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.ptr) % self.capacity

    def remaining(self) -> np.ndarray:
        """For each chronological position, transitions left in its episode (itself included)."""
        order = self.chronological()
        ep = self.episode[order]
        n = len(ep)
        if n == 0:
            return np.zeros(0, dtype=np.int64)
        # position of the last transition of each run of equal episode ids
        last = np.empty(n, dtype=np.int64)
        breaks = np.nonzero(ep[1:] != ep[:-1])[0]
        ends = np.append(breaks, n - 1)
        starts = np.insert(breaks + 1, 0, 0)
        for s, e in zip(starts, ends):
            last[s:e + 1] = e
        return last - np.arange(n) + 1

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform one-step transitions."""
        if self.size == 0:
            raise ReplayError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        if self.size == self.capacity:
            idx = (idx + self.ptr) % self.capacity
        return Batch(self.obs[idx], self.actions[idx], self.rewards[idx], self.next_obs[idx],
                     self.dones[idx], np.ones(batch_size, dtype=np.int64), idx)

    def sample_pairs(self, batch_size: int, ks, rng: np.random.Generator) -> Batch:
        """Uniform over valid ``(t, k)`` with ``k`` drawn from ``ks`` and ``t + k`` in the same episode.

        ``next_obs`` holds the observation k steps after ``obs``.
        """
        ks = np.unique(np.asarray(ks, dtype=np.int64))
        if ks.size == 0 or ks.min() < 1:
            raise ReplayError("k values must be positive")
        order = self.chronological()
        rem = self.remaining()
        counts = (ks[None, :] <= rem[:, None]).sum(axis=1)
        total = counts.sum()
        if total == 0:
            raise ReplayError(f"no valid (t, k) pair for k in {ks.tolist()}")
        pos = rng.choice(len(order), size=batch_size, p=counts / total)
        kk = np.array([ks[int(rng.integers(counts[p]))] for p in pos], dtype=np.int64)
        src = order[pos]
        dst = order[pos + kk - 1]
        return Batch(self.obs[src], self.actions[src], self.rewards[src], self.next_obs[dst],
                     self.dones[dst], kk, src)

    def state(self) -> dict[str, np.ndarray]:
        n = self.size
        return {"obs": self.obs[:n], "next_obs": self.next_obs[:n], "actions": self.actions[:n],
                "rewards": self.rewards[:n], "dones": self.dones[:n], "episode": self.episode[:n],
                "counters": np.array([self.ptr, self.size, self.current_episode])}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.ptr, self.size, self.current_episode = (int(x) for x in np.asarray(state["counters"]).ravel())
        n = self.size
        self.obs[:n] = np.asarray(state["obs"]).reshape(n, self.obs_dim)
        self.next_obs[:n] = np.asarray(state["next_obs"]).reshape(n, self.obs_dim)
        self.actions[:n] = np.asarray(state["actions"]).ravel().astype(np.int64)
        self.rewards[:n] = np.asarray(state["rewards"]).ravel()
        self.dones[:n] = np.asarray(state["dones"]).ravel()
        self.episode[:n] = np.asarray(state["episode"]).ravel().astype(np.int64)


def sample_pairs(buffer: ReplayBuffer, ks, batch_size: int, rng: np.random.Generator) -> Batch:
    return buffer.sample_pairs(batch_size, ks, rng)
