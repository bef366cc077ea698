"""Parameterized layers built on the tensor tape."""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from .tensor import Tensor, matmul, relu, tanh

ACTIVATIONS = {"relu": relu, "tanh": tanh, "identity": lambda x: x}


class Module:
    """Minimal parameter container. Subclasses register tensors and sub-modules as attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for key, value in vars(self).items():
            path = f"{prefix}{key}"
            if isinstance(value, Tensor):
                yield path, value
            elif isinstance(value, Module):
                yield from value.named_parameters(path + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{path}.{i}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def trainable(self, prefix: str = "") -> dict[str, Tensor]:
        return {k: p for k, p in self.named_parameters(prefix) if p.requires_grad}

    def requires_grad_(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for k, p in params.items():
            arr = np.asarray(state[k])
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {p.shape}")
            p.data = arr.astype(p.dtype).copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64):
        bound = 1.0 / np.sqrt(n_in)
        self.weight = Tensor(rng.uniform(-bound, bound, size=(n_in, n_out)).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(n_out, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(x, self.weight) + self.bias


class Mlp(Module):
    """Stack of dense layers; the activation is applied between layers, not after the last."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator,
                 activation: str = "relu", dtype=np.float64):
        widths = list(widths)
        if len(widths) < 2 or any(int(w) <= 0 for w in widths):
            raise ValueError(f"invalid layer widths {widths}")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        self.widths = widths
        self.activation = activation
        self.layers = [Linear(a, b, rng, dtype) for a, b in zip(widths[:-1], widths[1:])]

    @staticmethod
    def count_parameters(widths: Sequence[int]) -> int:
        return sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))

    def __call__(self, x: Tensor) -> Tensor:
        return forward_mlp(self, x)


def forward_mlp(net: Mlp, x: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != net.widths[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match first layer width {net.widths[0]}")
    act = ACTIVATIONS[net.activation]
    h = x
    for i, layer in enumerate(net.layers):
        h = layer(h)
        if i < len(net.layers) - 1:
            h = act(h)
    return h
