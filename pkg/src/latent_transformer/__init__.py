"""Discrete-latent sequence autoencoding for parallel decoding, on a small numpy autodiff core."""

from .autoencoder import AutoEncoder, ModelConfig
from .data import Corpus, TaskSpec, Vocab
from .model import LatentTransformer
from .predictor import ArBaseline, LatentPredictor, LatentSequence, full_decode, npd_rescore

__version__ = "0.1.0"
