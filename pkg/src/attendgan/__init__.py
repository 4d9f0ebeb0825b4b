"""Attention-based image captioning with adversarial style training, on a numpy autodiff core."""

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import CaptionDataset, StyleLexicon, Vocabulary, default_lexicon, synth_corpus
from .estimator import AttendCaptioner
from .trainer import TrainConfig, adversarial_train, mc_rewards, pg_loss, pretrain_discriminator, pretrain_generator

__all__ = [
    "AttendCaptioner", "CaptionDataset", "Checkpoint", "RunConfig", "StyleLexicon", "TrainConfig",
    "Vocabulary", "adversarial_train", "default_lexicon", "load_checkpoint", "mc_rewards", "pg_loss",
    "pretrain_discriminator", "pretrain_generator", "save_checkpoint", "synth_corpus",
]
__version__ = "0.1.0"
