"""Encoder, bottleneck and Q-network wiring shared by all stages."""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from ..bottleneck import Codebook, VibLayer, quantize, vib_deterministic, vib_forward
from ..numcore import Mlp, Module, Tensor
from ..objectives import PrototypeBank
from .config import RunConfig

N_ACTIONS = 4


@dataclass
class Embedding:
    z: Tensor               # bottleneck output fed to heads (z_q, or the VIB/raw output without VQ)
    pre_quant: Tensor       # input to the quantizer
    vq_loss: Tensor | float
    kl: Tensor | float
    codes: np.ndarray | None


class RepModel(Module):
    """Encoder f_xi -> predictor f_p -> optional VIB -> optional grouped VQ."""

    def __init__(self, cfg: RunConfig, obs_dim: int, rng: np.random.Generator):
        dtype = np.dtype(cfg.dtype)
        h = cfg.feature_dim
        self.encoder = Mlp([obs_dim, cfg.hidden_dim, cfg.feature_dim], rng, "relu", dtype)
        out = 2 * h if cfg.use_vib else h
        self.predictor = Mlp([cfg.feature_dim, cfg.hidden_dim, out], rng, "relu", dtype)
        if cfg.use_vib:
            # start the posterior narrow so early samples carry the state, not the noise
            self.predictor.layers[-1].bias.data[h:] = cfg.vib_log_sigma_init
        self.vib = VibLayer(h, rng, cfg.beta_vib, dtype=dtype) if cfg.use_vib else None
        self.codebook = (Codebook(h, cfg.groups, cfg.codes, rng, cfg.beta_commit, cfg.codebook_mode,
                                  cfg.ema_decay, cfg.dead_code_window, dtype=dtype)
                         if cfg.use_vq else None)
        self.dtype = dtype
        self.dim = h

    def features(self, obs) -> Tensor:
        x = Tensor(np.asarray(obs, dtype=self.dtype))
        if x.ndim == 1:
            x = x.reshape(1, -1)
        return self.predictor(self.encoder(x))

    def embed(self, obs, rng: np.random.Generator | None = None, track: bool = False,
              quantized: bool = True) -> Embedding:
        """Stochastic VIB path when ``rng`` is given, deterministic mean path otherwise."""
        z = self.features(obs)
        kl: Tensor | float = 0.0
        if self.vib is not None:
            if rng is not None:
                z, kl = vib_forward(self.vib, z, rng)
            else:
                z = vib_deterministic(self.vib, z)
        if self.codebook is None or not quantized:
            return Embedding(z, z, 0.0, kl, None)
        qr = quantize(z, self.codebook, track=track)
        return Embedding(qr.z_q, z, qr.vq_loss, kl, qr.codes)

    def encoder_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.trainable("encoder.")
        out.update(self.predictor.trainable("predictor."))
        return out

    def bottleneck_parameters(self) -> dict[str, Tensor]:
        out = {}
        if self.vib is not None:
            out.update(self.vib.trainable("vib."))
        if self.codebook is not None and self.codebook.mode == "gradient" and not self.codebook.frozen:
            out.update(self.codebook.trainable("codebook."))
        return out


class QNetwork(Module):
    def __init__(self, cfg: RunConfig, rng: np.random.Generator):
        self.net = Mlp([cfg.feature_dim, cfg.hidden_dim, N_ACTIONS], rng, "relu", np.dtype(cfg.dtype))

    def __call__(self, z: Tensor) -> Tensor:
        return self.net(z)


def frozen_copy(module: Module) -> Module:
    twin = copy.deepcopy(module)
    twin.requires_grad_(False)
    return twin


def make_prototypes(cfg: RunConfig, rng: np.random.Generator) -> PrototypeBank:
    return PrototypeBank(cfg.n_prototypes, cfg.feature_dim, rng, cfg.proto_tau, cfg.sinkhorn_iters,
                         np.dtype(cfg.dtype))


def make_inverse_head(cfg: RunConfig, rng: np.random.Generator) -> Mlp:
    return Mlp([2 * cfg.feature_dim, cfg.hidden_dim, N_ACTIONS], rng, "relu", np.dtype(cfg.dtype))
