"""Stage entry points over a :class:`Trainer`."""
from __future__ import annotations

from .trainer import Trainer


def stage1_pretrain_bottleneck(trainer: Trainer) -> Trainer:
    """Random-policy collection and VIB + codebook training up to ``stage1_end`` frames."""
    trainer.stage1()
    return trainer


def stage2_pretrain_encoder(trainer: Trainer) -> Trainer:
    """Reward-free encoder pretraining with intrinsic-reward exploration up to ``stage2_end``."""
    trainer.stage2()
    return trainer


def stage3_finetune(trainer: Trainer) -> Trainer:
    """DQN fine-tuning on task reward through the frozen bottleneck up to ``stage3_end``."""
    trainer.stage3()
    return trainer
