"""Reference-conditioned rectified-flow transformer with explicit
reference-feature alignment, plus the analysis harness around it."""

from .codec import LatentCodec, LatentTokens
from .data import (DataConfig, Episode, PromptTokens, SubjectSpec,
                   augment_reference, generate_episode)
from .encoders import EncoderBank, EncoderPretrainConfig, ENCODER_IDS
from .losses import RAConfig, ra_loss, ra_neg, ra_pos, repa_loss, rf_loss, total_loss
from .model import ModelConfig, RefDiT
from .sampler import CFGConfig, Sampler
from .trainer import TrainConfig, Trainer, LOSS_MODES

__all__ = [
    "LatentCodec", "LatentTokens", "DataConfig", "Episode", "PromptTokens",
    "SubjectSpec", "augment_reference", "generate_episode", "EncoderBank",
    "EncoderPretrainConfig", "ENCODER_IDS", "RAConfig", "ra_loss", "ra_neg",
    "ra_pos", "repa_loss", "rf_loss", "total_loss", "ModelConfig", "RefDiT",
    "CFGConfig", "Sampler", "TrainConfig", "Trainer", "LOSS_MODES",
]

__version__ = "0.1.0"
