"""Mixed-bandwidth acoustic modeling: bandwidth embeddings and parallel
convolutional layers over a hand-written numpy network, with a synthetic
two-bandwidth corpus for end-to-end verification."""

__version__ = "0.1.0"

from .dsp import Waveform, band_limit, read_wav, resample, write_wav
from .features import (
    FeatureTensor,
    MelBank,
    featurize_utterance,
    log_mel,
    mel_filterbank,
    stack_context,
)
from .model import Model, ModelConfig, build_model, fold_embedding, load_model, save_model
from .synthcorpus import CorpusSpec, synth_corpus
from .trainer import TrainScenario, make_scenario, train

__all__ = [
    "Waveform",
    "read_wav",
    "write_wav",
    "resample",
    "band_limit",
    "MelBank",
    "FeatureTensor",
    "mel_filterbank",
    "log_mel",
    "featurize_utterance",
    "stack_context",
    "Model",
    "ModelConfig",
    "build_model",
    "fold_embedding",
    "save_model",
    "load_model",
    "CorpusSpec",
    "synth_corpus",
    "TrainScenario",
    "make_scenario",
    "train",
    "__version__",
]
