"""Flat run configuration with JSON round-tripping and ``key=value`` overrides."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, fields
from pathlib import Path

from ..envs import LAYOUT_KINDS, NOISE_MODES, RENDER_MODES
from ..objectives import OBJECTIVES


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    seed: int = 0
    env: str = "grid"
    pretrain_env: str = "grid"
    render_mode: str = "onehot"
    noise: str = "off"
    pretrain_noise: str = "off"
    horizon: int = 200
    train_goals: str = "center"
    # stage boundaries in environment frames: stage I = [0, m), II = [m, n), III = [n, K)
    stage1_end: int = 2000
    stage2_end: int = 10000
    stage3_end: int = 15000
    seed_frames: int = 500
    batch_size: int = 128
    gamma: float = 0.99
    lr: float = 3e-3
    tau_q: float = 0.01
    feature_dim: int = 128
    hidden_dim: int = 128
    groups: int = 8
    codes: int = 50
    use_vib: bool = True
    use_vq: bool = True
    beta_vib: float = 0.01
    vib_log_sigma_init: float = -5.0
    beta_commit: float = 0.25
    codebook_mode: str = "gradient"
    ema_decay: float = 0.99
    dead_code_window: int = 1000
    codebook_data_init: bool = True
    knn_k: int = 3
    queue_capacity: int = 2048
    queue_quantized: bool = True
    reward_relabel: bool = True
    objective: str = "contrastive"
    contrastive_tau: float = 0.1
    n_prototypes: int = 16
    proto_tau: float = 0.1
    sinkhorn_iters: int = 3
    proto_ema_target: bool = False
    max_k: int = 8
    n_k_samples: int = 8
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    freeze_encoder_stage1: bool = True
    freeze_encoder_stage3: bool = False
    stage3_commitment: bool = True
    replay_capacity: int = 100000
    update_every: int = 2
    eval_every: int = 1000
    log_every: int = 100
    trace_intrinsic: bool = False
    dtype: str = "float32"

    def validate(self) -> "RunConfig":
        errs = []
        if not 0 <= self.stage1_end <= self.stage2_end <= self.stage3_end:
            errs.append("stage boundaries must satisfy 0 <= stage1_end <= stage2_end <= stage3_end")
        if not 0.0 <= self.gamma < 1.0:
            errs.append("gamma must lie in [0, 1)")
        for key in ("lr", "tau_q", "beta_commit", "contrastive_tau", "proto_tau"):
            if getattr(self, key) <= 0:
                errs.append(f"{key} must be positive")
        if not 0.0 < self.tau_q <= 1.0:
            errs.append("tau_q must lie in (0, 1]")
        if self.beta_vib < 0:
            errs.append("beta_vib must be non-negative")
        if not 0.0 <= self.ema_decay < 1.0:
            errs.append("ema_decay must lie in [0, 1)")
        for key in ("batch_size", "feature_dim", "hidden_dim", "groups", "codes", "knn_k",
                    "queue_capacity", "horizon", "replay_capacity", "max_k", "n_k_samples",
                    "log_every", "eval_every", "update_every"):
            if getattr(self, key) <= 0:
                errs.append(f"{key} must be positive")
        if self.n_prototypes < 2:
            errs.append("n_prototypes must be at least 2")
        if self.use_vq and self.feature_dim % self.groups:
            errs.append(f"feature_dim {self.feature_dim} is not divisible by groups {self.groups}")
        if self.env not in LAYOUT_KINDS or self.pretrain_env not in LAYOUT_KINDS:
            errs.append(f"env kinds must be one of {LAYOUT_KINDS}")
        if self.noise not in NOISE_MODES or self.pretrain_noise not in NOISE_MODES:
            errs.append(f"noise modes must be one of {NOISE_MODES}")
        if self.render_mode not in RENDER_MODES:
            errs.append(f"render_mode must be one of {RENDER_MODES}")
        if self.objective not in OBJECTIVES:
            errs.append(f"objective must be one of {OBJECTIVES}")
        if self.codebook_mode not in ("gradient", "ema"):
            errs.append("codebook_mode must be 'gradient' or 'ema'")
        if self.dtype not in ("float32", "float64"):
            errs.append("dtype must be float32 or float64")
        if not 0.0 <= self.epsilon_end <= self.epsilon_start <= 1.0:
            errs.append("epsilon schedule must satisfy 0 <= end <= start <= 1")
        try:
            self.goal_cells()
        except ValueError as exc:
            errs.append(str(exc))
        if errs:
            raise ConfigError("; ".join(errs))
        return self

    def goal_cells(self):
        """``"center"`` or a list of ``(row, col)`` cells parsed from ``"r,c;r,c"``."""
        if self.train_goals == "center":
            return "center"
        cells = []
        for part in self.train_goals.split(";"):
            try:
                r, c = (int(x) for x in part.split(","))
            except ValueError:
                raise ValueError(f"bad train_goals entry {part!r}") from None
            cells.append((r, c))
        return cells

    @property
    def run_name(self) -> str:
        return f"{self.env}_{self.objective}_{self.groups}g{self.codes}c_seed{self.seed}"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False) + "\n"

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = sorted(set(data) - set(cls.field_names()))
        if unknown:
            raise ConfigError(f"unknown config keys {unknown}; valid keys: {', '.join(cls.field_names())}")
        cfg = cls()
        for key, value in data.items():
            setattr(cfg, key, _coerce(key, value))
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(data, dict) or any(isinstance(v, (dict, list)) for v in data.values()):
            raise ConfigError(f"{path}: config must be a flat JSON object")
        return cls.from_dict(data)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def with_overrides(self, pairs) -> "RunConfig":
        data = self.to_dict()
        for pair in pairs:
            if "=" not in pair:
                raise ConfigError(f"override {pair!r} is not key=value")
            key, value = pair.split("=", 1)
            key = key.strip()
            if key not in data:
                raise ConfigError(f"unknown config key {key!r}; valid keys: {', '.join(self.field_names())}")
            data[key] = value.strip()
        return RunConfig.from_dict(data)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, value):
    kind = _TYPES[key]
    if kind == "bool":
        if isinstance(value, bool):
            return value
        text = str(value).strip().lower()
        if text in ("1", "true", "yes", "on"):
            return True
        if text in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {value!r}")
    try:
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(float(value)) if isinstance(value, str) and "e" in value.lower() else int(value)
        if kind == "float":
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: expected {kind}, got {value!r}") from None
    return str(value)
