"""Discrete information bottleneck representations for pretraining and fine-tuning RL agents."""
from .bottleneck import Codebook, VibLayer, expressible_states, quantize, vib_deterministic, vib_forward
from .pipeline import RunConfig, Trainer

__all__ = ["Codebook", "RunConfig", "Trainer", "VibLayer", "expressible_states", "quantize",
           "vib_deterministic", "vib_forward"]
__version__ = "0.1.0"
