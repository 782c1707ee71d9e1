"""Speech language modelling with discrete tokens plus learned continuous latents."""

from .config import Config, ConfigError, micro_config
from .data import (CorpusStats, FeatureSequence, SynthCorpus, SynthCorpusSpec, UtterancePair,
                   generate_synth_corpus, load_corpus, make_discrimination_pairs, save_corpus,
                   wav_to_features)
from .model import VariationalSpeechModel, build_model
from .objective import BetaSchedule, ElboTerms, beta_at, compute_loss
from .runtime import ModelBundle, TrainingDivergedError, load_checkpoint, save_checkpoint, train
from .tokenizer import Codebook, TokenSequence, fit_codebook, tokenize

__all__ = [
    "BetaSchedule", "Codebook", "Config", "ConfigError", "CorpusStats", "ElboTerms", "FeatureSequence",
    "ModelBundle", "SynthCorpus", "SynthCorpusSpec", "TokenSequence", "TrainingDivergedError",
    "UtterancePair", "VariationalSpeechModel", "beta_at", "build_model", "compute_loss", "fit_codebook",
    "generate_synth_corpus", "load_checkpoint", "load_corpus", "make_discrimination_pairs", "micro_config",
    "save_checkpoint", "save_corpus", "tokenize", "train", "wav_to_features",
]
