from .config import ConfigError, RunConfig
from .replay import Batch, ReplayBuffer, ReplayError, sample_pairs
from .trainer import DivergenceError, StageOrderError, Trainer
from .stages import stage1_pretrain_bottleneck, stage2_pretrain_encoder, stage3_finetune

__all__ = [
    "Batch", "ConfigError", "DivergenceError", "ReplayBuffer", "ReplayError", "RunConfig",
    "StageOrderError", "Trainer", "sample_pairs", "stage1_pretrain_bottleneck",
    "stage2_pretrain_encoder", "stage3_finetune",
]
