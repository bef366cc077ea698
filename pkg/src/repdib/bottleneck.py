"""Gaussian information bottleneck and grouped vector quantization."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .numcore import Linear, Module, Tensor, clip, exp, square, stop_gradient, straight_through

LOG_SIGMA_MIN = -6.0
LOG_SIGMA_MAX = 2.0


class ConfigurationError(ValueError):
    pass


def _as_batch(z: Tensor) -> tuple[Tensor, bool]:
    if z.ndim == 1:
        return z.reshape(1, -1), True
    return z, False


class VibLayer(Module):
    """Splits a 2h-dim input into mean and log-scale halves and projects samples to h dims.

    The projection is a learned linear map unless ``projection=False``, in which case it
    is the identity.
    """

    def __init__(self, h: int, rng: np.random.Generator, beta: float = 0.01,
                 projection: bool = True, dtype=np.float64):
        self.h = h
        self.beta = beta
        self.proj = Linear(h, h, rng, dtype) if projection else None

    def split(self, z: Tensor) -> tuple[Tensor, Tensor]:
        if z.shape[-1] % 2:
            raise ValueError(f"VIB input dim must be even, got {z.shape[-1]}")
        if z.shape[-1] != 2 * self.h:
            raise ValueError(f"VIB expects input dim {2 * self.h}, got {z.shape[-1]}")
        mu = z[:, : self.h]
        log_sigma = clip(z[:, self.h:], LOG_SIGMA_MIN, LOG_SIGMA_MAX)
        return mu, log_sigma

    def project(self, x: Tensor) -> Tensor:
        return x if self.proj is None else self.proj(x)

    def sample(self, z: Tensor, rng: np.random.Generator) -> Tensor:
        """Reparameterized pre-projection sample mu + sigma * eps."""
        z, single = _as_batch(z)
        mu, log_sigma = self.split(z)
        eps = rng.standard_normal(mu.shape).astype(mu.dtype)
        out = mu + exp(log_sigma) * eps
        return out.reshape(-1) if single else out

    def kl(self, z: Tensor) -> Tensor:
        """Closed-form KL to a unit Gaussian, summed over dims and averaged over the batch."""
        z, _ = _as_batch(z)
        mu, log_sigma = self.split(z)
        per_dim = square(mu) + exp(log_sigma * 2.0) - 1.0 - log_sigma * 2.0
        return per_dim.sum(axis=1).mean() * 0.5

    def __call__(self, z: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
        return vib_forward(self, z, rng)


def vib_forward(vib: VibLayer, z: Tensor, rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    zb, single = _as_batch(z)
    out = vib.project(vib.sample(zb, rng))
    kl = vib.kl(zb)
    return (out.reshape(-1) if single else out), kl


def vib_deterministic(vib: VibLayer, z: Tensor) -> Tensor:
    zb, single = _as_batch(z)
    mu, _ = vib.split(zb)
    out = vib.project(mu)
    return out.reshape(-1) if single else out


@dataclass
class QuantizationResult:
    z_q: Tensor
    codes: np.ndarray
    vq_loss: Tensor
    distances: np.ndarray


class Codebook(Module):
    """G groups of L code vectors, each of dimension m / G."""

    def __init__(self, m: int, groups: int, codes_per_group: int, rng: np.random.Generator,
                 beta_commit: float = 0.25, mode: str = "gradient", decay: float = 0.99,
                 dead_window: int = 1000, init_scale: float | None = None, dtype=np.float64):
        if groups <= 0 or codes_per_group <= 0:
            raise ConfigurationError("group and code counts must be positive")
        if m % groups:
            raise ConfigurationError(f"latent dim {m} is not divisible by group count {groups}")
        if mode not in ("gradient", "ema"):
            raise ConfigurationError(f"unknown codebook update mode {mode!r}")
        self.m = m
        self.G = groups
        self.L = codes_per_group
        self.d = m // groups
        self.beta_commit = beta_commit
        self.mode = mode
        self.decay = decay
        self.dead_window = dead_window
        scale = 1.0 / codes_per_group if init_scale is None else init_scale
        init = rng.uniform(-scale, scale, size=(groups, codes_per_group, self.d)).astype(dtype)
        self.codes = Tensor(init, requires_grad=(mode == "gradient"))
        self.usage = np.zeros((groups, codes_per_group), dtype=np.int64)
        self.window_usage = np.zeros((groups, codes_per_group), dtype=np.int64)
        self.last_used = np.zeros((groups, codes_per_group), dtype=np.int64)
        self.calls = 0
        self.ema_count = np.ones((groups, codes_per_group), dtype=dtype)
        self.ema_sum = init.copy()
        self.frozen = False

    @property
    def vectors(self) -> np.ndarray:
        return self.codes.data

    def freeze(self) -> None:
        self.frozen = True
        self.codes.requires_grad = False

    def reset_window(self) -> None:
        self.window_usage[:] = 0

    def buffers(self) -> dict[str, np.ndarray]:
        return {
            "codes": self.codes.data, "usage": self.usage, "window_usage": self.window_usage,
            "last_used": self.last_used, "calls": np.array([self.calls]),
            "ema_count": self.ema_count, "ema_sum": self.ema_sum,
        }

    def load_buffers(self, state: dict[str, np.ndarray]) -> None:
        self.codes.data = np.asarray(state["codes"], dtype=self.codes.dtype).reshape(self.codes.shape).copy()
        for key in ("usage", "window_usage", "last_used"):
            setattr(self, key, np.asarray(state[key]).astype(np.int64).reshape(self.G, self.L))
        self.calls = int(np.asarray(state["calls"]).ravel()[0])
        dtype = self.codes.dtype
        self.ema_count = np.asarray(state["ema_count"], dtype=dtype).reshape(self.G, self.L).copy()
        self.ema_sum = np.asarray(state["ema_sum"], dtype=dtype).reshape(self.G, self.L, self.d).copy()

    def nearest(self, segments: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Per-group argmin over codes for segments shaped (N, G, d); ties go to the lowest index.

        Distances come from the expanded quadratic form; rows whose best candidates fall
        within rounding tolerance of each other are re-ranked with exact differences.
        """
        codes = self.codes.data
        seg = np.asarray(segments)
        cc = (seg * seg).sum(axis=2)
        ee = (codes * codes).sum(axis=2)
        cross = np.matmul(seg.transpose(1, 0, 2), codes.transpose(0, 2, 1)).transpose(1, 0, 2)
        sq = cc[:, :, None] - 2.0 * cross + ee[None]
        best = sq.min(axis=2, keepdims=True)
        eps = np.finfo(np.result_type(seg, codes)).eps
        tol = 64 * eps * (cc[:, :, None] + ee.max(axis=1)[None, :, None]) + 1e-30
        cand = sq <= best + tol
        idx = sq.argmin(axis=2)
        amb_n, amb_g = np.nonzero(cand.sum(axis=2) > 1)
        if amb_n.size:
            diff = seg[amb_n, amb_g][:, None, :] - codes[amb_g]
            exact = np.einsum("kld,kld->kl", diff, diff)
            exact = np.where(cand[amb_n, amb_g], exact, np.inf)
            idx[amb_n, amb_g] = exact.argmin(axis=1)
        chosen = codes[np.arange(self.G)[None, :], idx]
        dist = np.sqrt(((seg - chosen) ** 2).sum(axis=2))
        return idx, dist

    def init_from_segments(self, segments: np.ndarray, rng: np.random.Generator) -> None:
        """Set every code to a randomly chosen observed segment (with small jitter)."""
        n = segments.shape[0]
        for g in range(self.G):
            pick = rng.integers(0, n, size=self.L)
            jitter = rng.normal(0.0, 1e-3, size=(self.L, self.d))
            self.codes.data[g] = (segments[pick, g] + jitter).astype(self.codes.dtype)
        self.ema_sum = self.codes.data.copy()
        self.ema_count[:] = 1.0

    def reseed_dead(self, segments: np.ndarray, rng: np.random.Generator) -> int:
        """Replace codes idle for more than ``dead_window`` calls with random recent segments."""
        if self.frozen or self.dead_window <= 0:
            return 0
        dead = (self.calls - self.last_used) > self.dead_window
        count = 0
        for g, j in zip(*np.nonzero(dead)):
            seg = segments[rng.integers(0, segments.shape[0]), g]
            self.codes.data[g, j] = seg.astype(self.codes.dtype)
            self.ema_sum[g, j] = seg
            self.ema_count[g, j] = 1.0
            self.last_used[g, j] = self.calls
            count += 1
        return count


def quantize(z_e: Tensor, cb: Codebook, track: bool = True) -> QuantizationResult:
    zb, single = _as_batch(z_e)
    if zb.shape[1] != cb.m:
        if zb.shape[1] % cb.G:
            raise ConfigurationError(f"latent dim {zb.shape[1]} is not divisible by group count {cb.G}")
        raise ConfigurationError(f"latent dim {zb.shape[1]} does not match codebook dim {cb.m}")
    n = zb.shape[0]
    segments = zb.data.reshape(n, cb.G, cb.d)
    idx, dist = cb.nearest(segments)
    groups = np.broadcast_to(np.arange(cb.G), idx.shape)
    selected = cb.codes[groups, idx].reshape(n, cb.m)
    z_q = straight_through(zb, selected.data)
    codebook_term = square(stop_gradient(zb) - selected).sum(axis=1)
    commit_term = square(zb - stop_gradient(selected)).sum(axis=1)
    vq_loss = (codebook_term + commit_term * cb.beta_commit).mean()
    if track:
        cb.calls += 1
        for g in range(cb.G):
            counts = np.bincount(idx[:, g], minlength=cb.L)
            cb.usage[g] += counts
            cb.window_usage[g] += counts
            cb.last_used[g, counts > 0] = cb.calls
    if single:
        return QuantizationResult(z_q.reshape(-1), idx[0], vq_loss, dist[0])
    return QuantizationResult(z_q, idx, vq_loss, dist)


def codebook_update_ema(cb: Codebook, segments: np.ndarray, codes: np.ndarray) -> None:
    """Move each assigned code toward the running mean of its segments; unassigned codes stay put."""
    if cb.mode != "ema":
        raise ConfigurationError("codebook_update_ema requires update mode 'ema'")
    if cb.frozen:
        return
    segments = np.asarray(segments, dtype=np.float64).reshape(-1, cb.G, cb.d)
    codes = np.asarray(codes).reshape(-1, cb.G)
    if segments.shape[0] == 0:
        return
    lam = cb.decay
    for g in range(cb.G):
        counts = np.bincount(codes[:, g], minlength=cb.L).astype(np.float64)
        sums = np.zeros((cb.L, cb.d))
        np.add.at(sums, codes[:, g], segments[:, g])
        hit = counts > 0
        cb.ema_count[g, hit] = lam * cb.ema_count[g, hit] + (1.0 - lam) * counts[hit]
        cb.ema_sum[g, hit] = lam * cb.ema_sum[g, hit] + (1.0 - lam) * sums[hit]
        cb.codes.data[g, hit] = (cb.ema_sum[g, hit] / cb.ema_count[g, hit, None]).astype(cb.codes.dtype)


def expressible_states(cb: Codebook) -> str:
    return str(int(cb.L) ** int(cb.G))


def dump_codebook_csv(cb: Codebook, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["group", "index", "usage"] + [f"v{i}" for i in range(cb.d)])
        for g in range(cb.G):
            for j in range(cb.L):
                w.writerow([g, j, int(cb.usage[g, j])] + [repr(float(x)) for x in cb.codes.data[g, j]])
