"""Self-supervised representation losses, the Q-learning loss and loss composition."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numcore import (
    Mlp,
    Module,
    Tensor,
    concat,
    gather,
    l2_normalize,
    log_softmax,
    matmul,
    square,
    stop_gradient,
)

OBJECTIVES = ("proto", "inverse1", "inverseK", "contrastive")


class PrototypeBank(Module):
    def __init__(self, n_prototypes: int, dim: int, rng: np.random.Generator,
                 temperature: float = 0.1, sinkhorn_iters: int = 3, dtype=np.float64):
        if n_prototypes < 2:
            raise ValueError("a prototype bank needs at least 2 prototypes")
        protos = rng.standard_normal((n_prototypes, dim))
        protos /= np.linalg.norm(protos, axis=1, keepdims=True)
        self.prototypes = Tensor(protos.astype(dtype), requires_grad=True)
        self.temperature = temperature
        self.sinkhorn_iters = sinkhorn_iters

    def normalize(self) -> None:
        p = self.prototypes.data
        self.prototypes.data = (p / np.linalg.norm(p, axis=1, keepdims=True)).astype(p.dtype)


def sinkhorn_targets(scores: np.ndarray, temperature: float = 0.1, iters: int = 3) -> np.ndarray:
    """Balanced soft assignment of a batch onto prototypes.

    Columns (prototypes) and rows (samples) are normalized alternately; the row pass
    runs last so each row is a probability vector.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(scores)):
        raise ValueError("sinkhorn scores must be finite")
    b, k = scores.shape
    q = np.exp((scores - scores.max()) / temperature)
    q /= q.sum()
    for _ in range(iters):
        q /= q.sum(axis=0, keepdims=True)
        q /= k
        q /= q.sum(axis=1, keepdims=True)
        q /= b
    return q * b


def cross_entropy_soft(log_p: Tensor, q: np.ndarray) -> Tensor:
    return -(log_p * q).sum(axis=1).mean()


def proto_loss(z_s: Tensor, z_next: Tensor, bank: PrototypeBank,
               target_bank: PrototypeBank | None = None) -> Tensor:
    """Cross-entropy of prototype probabilities for s against Sinkhorn targets for s'.

    Targets use ``target_bank`` (an EMA copy) when given, else the same prototypes.
    """
    target_bank = bank if target_bank is None else target_bank
    if z_s.shape[0] < 2:
        raise ValueError("proto_loss needs a batch of at least 2")
    zs = l2_normalize(z_s)
    zt = l2_normalize(stop_gradient(z_next))
    logits = matmul(zs, bank.prototypes.T) * (1.0 / bank.temperature)
    log_p = log_softmax(logits)
    target_scores = zt.data @ target_bank.prototypes.data.T
    q = sinkhorn_targets(target_scores, bank.temperature, bank.sinkhorn_iters)
    return cross_entropy_soft(log_p, q.astype(log_p.dtype))


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    return -gather(log_softmax(logits), np.asarray(labels)).mean()


def inverse_loss(z_t: Tensor, z_tk: Tensor, actions: np.ndarray, head: Mlp) -> Tensor:
    """Cross-entropy of the first action given the embeddings at both ends of a k-step span."""
    logits = head(concat([z_t, z_tk], axis=1))
    return softmax_cross_entropy(logits, actions)


def contrastive_loss(z_t: Tensor, z_next: Tensor, temperature: float = 0.1,
                     symmetric: bool = False) -> Tensor:
    """InfoNCE with in-batch negatives over cosine similarities."""
    if z_t.shape[0] < 2:
        raise ValueError("contrastive_loss needs a batch of at least 2")
    a = l2_normalize(z_t)
    b = l2_normalize(z_next)
    logits = matmul(a, b.T) * (1.0 / temperature)
    labels = np.arange(z_t.shape[0])
    loss = softmax_cross_entropy(logits, labels)
    if symmetric:
        loss = (loss + softmax_cross_entropy(logits.T, labels)) * 0.5
    return loss


def dqn_loss(q_values: Tensor, actions: np.ndarray, rewards: np.ndarray, dones: np.ndarray,
             next_q_target: np.ndarray, gamma: float) -> Tensor:
    """Mean squared one-step TD error; the bootstrap target carries no gradient."""
    if q_values.shape[0] == 0:
        raise ValueError("dqn_loss on an empty batch")
    if not 0.0 <= gamma < 1.0:
        raise ValueError(f"discount must lie in [0, 1), got {gamma}")
    next_q_target = np.asarray(next_q_target.data if isinstance(next_q_target, Tensor) else next_q_target)
    target = np.asarray(rewards) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * next_q_target.max(axis=1)
    q_sa = gather(q_values, actions)
    return square(q_sa - target.astype(q_sa.dtype)).mean()


def td_target(rewards, dones, next_q, gamma: float) -> np.ndarray:
    return np.asarray(rewards) + gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * np.asarray(next_q).max(axis=1)


def soft_update(target: Module, source: Module, tau: float) -> None:
    src = dict(source.named_parameters())
    for name, p in target.named_parameters():
        p.data = ((1.0 - tau) * p.data + tau * src[name].data).astype(p.dtype)


@dataclass
class LossComponents:
    objective: Tensor | float = 0.0
    discretization: Tensor | float = 0.0
    gaussian: Tensor | float = 0.0

    def values(self) -> dict[str, float]:
        def val(x):
            return float(x.data) if isinstance(x, Tensor) else float(x)
        return {"objective": val(self.objective), "discretization": val(self.discretization),
                "gaussian": val(self.gaussian)}


def total_loss(components: LossComponents, beta_vib: float = 0.01):
    """Objective + discretization + beta_vib * gaussian, refusing non-finite parts."""
    for name, value in components.values().items():
        if not math.isfinite(value):
            raise FloatingPointError(f"loss component '{name}' is not finite")
    return components.objective + components.discretization + components.gaussian * beta_vib
