"""k-nearest-neighbour intrinsic reward over discretized embeddings."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bottleneck import Codebook, VibLayer, quantize, vib_deterministic
from .numcore import Tensor


class CandidateQueue:
    """FIFO ring buffer of embeddings; each slot has a unique insertion id."""

    def __init__(self, capacity: int, dim: int, dtype=np.float64):
        if capacity <= 0:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.items = np.zeros((capacity, dim), dtype=dtype)
        self.ids = np.full(capacity, -1, dtype=np.int64)
        self.head = 0
        self.fill = 0
        self.inserted = 0

    def __len__(self) -> int:
        return self.fill

    def contents(self) -> np.ndarray:
        """Stored vectors, oldest first."""
        if self.fill < self.capacity:
            return self.items[: self.fill].copy()
        return np.concatenate([self.items[self.head:], self.items[: self.head]])

    def view(self) -> np.ndarray:
        return self.items[: self.fill] if self.fill < self.capacity else self.items

    def state(self) -> dict[str, np.ndarray]:
        return {"items": self.items, "ids": self.ids,
                "counters": np.array([self.head, self.fill, self.inserted])}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.items = np.asarray(state["items"], dtype=self.items.dtype).reshape(self.capacity, self.dim).copy()
        self.ids = np.asarray(state["ids"]).astype(np.int64).copy()
        self.head, self.fill, self.inserted = (int(x) for x in np.asarray(state["counters"]).ravel())


def enqueue(queue: CandidateQueue, z) -> int:
    """Append one or more embeddings; returns the id of the last insert."""
    z = np.asarray(z, dtype=np.float64)
    rows = z.reshape(-1, queue.dim)
    for row in rows:
        queue.items[queue.head] = row
        queue.ids[queue.head] = queue.inserted
        queue.inserted += 1
        queue.head = (queue.head + 1) % queue.capacity
        queue.fill = min(queue.fill + 1, queue.capacity)
    return queue.inserted - 1


@dataclass
class RewardResult:
    reward: float
    warming_up: bool


def intrinsic_reward(z, queue: CandidateQueue, k: int = 3, exclude_id: int | None = None) -> RewardResult:
    """Distance from ``z`` to its k-th nearest queue entry.

    ``exclude_id`` removes one stored entry by identity (its insertion id), never by value.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    z = np.asarray(z, dtype=np.float64).ravel()
    stored = queue.view()
    if exclude_id is not None:
        stored = stored[queue.ids[: len(stored)] != exclude_id]
    if len(stored) < k:
        return RewardResult(0.0, True)
    d = np.sqrt(((stored - z) ** 2).sum(axis=1))
    return RewardResult(float(np.partition(d, k - 1)[k - 1]), False)


def batch_intrinsic_reward(z: np.ndarray, queue: CandidateQueue, k: int = 3) -> tuple[np.ndarray, bool]:
    """Rewards for a batch against the same queue snapshot (no batch member sees another)."""
    stored = queue.view()
    z = np.asarray(z, dtype=stored.dtype)
    if len(stored) < k:
        return np.zeros(len(z)), True
    sq = (z * z).sum(1)[:, None] - 2.0 * z @ stored.T + (stored * stored).sum(1)[None, :]
    idx = np.argpartition(sq, k - 1, axis=1)[:, k - 1]
    # recompute the selected distance exactly; the expanded form leaves rounding residue
    diff = z.astype(np.float64) - stored[idx].astype(np.float64)
    exact = np.sqrt((diff ** 2).sum(axis=1))
    return exact, False


def embed_discrete(z_s: Tensor, vib: VibLayer | None, cb: Codebook | None, quantized: bool = True) -> np.ndarray:
    """Deterministic bottleneck chain used for rewards and analyses."""
    z = vib_deterministic(vib, z_s) if vib is not None else z_s
    if cb is not None and quantized:
        z = quantize(z, cb, track=False).z_q
    return np.array(z.data, dtype=np.float64)


def reward_pipeline(z_s: Tensor, vib: VibLayer | None, cb: Codebook | None,
                    queue: CandidateQueue, k: int = 3, quantized: bool = True) -> RewardResult:
    """Reward for one state, then enqueue its embedding so it never counts itself."""
    z = embed_discrete(z_s, vib, cb, quantized)
    result = intrinsic_reward(z, queue, k)
    enqueue(queue, z)
    return result
