import numpy as np
import pytest

from repdib.numcore import Tensor, backward
from repdib.pipeline import RunConfig


def numeric_grad(fn, arr: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``fn`` w.r.t. every entry of ``arr`` (modified in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = fn()
        arr[i] = old - h
        down = fn()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(1e-8, np.abs(a) + np.abs(b))))


def check_grads(loss_fn, tensors, h=1e-5):
    """Largest relative error between tape gradients and finite differences."""
    for t in tensors:
        t.grad = None
    loss = loss_fn()
    backward(loss)
    worst = 0.0
    for t in tensors:
        fd = numeric_grad(lambda: float(loss_fn().data), t.data, h)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_err(analytic, fd))
    return worst


def param(rng, *shape, scale=1.0):
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def tiny_config(**kw) -> RunConfig:
    """A short pipeline configuration for fast integration tests."""
    base = dict(stage1_end=60, stage2_end=140, stage3_end=200, seed_frames=40, batch_size=16,
                feature_dim=16, hidden_dim=16, groups=4, codes=8, queue_capacity=64,
                eval_every=30, log_every=20, dead_code_window=50, update_every=1)
    base.update(kw)
    return RunConfig.from_dict(base).validate()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
