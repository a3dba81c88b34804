"""Toxin-protein interaction prediction with a small numpy transformer."""

__version__ = "0.1.0"

from tipformer.data import Corpus, DatasetSplit, InteractionPair, ProteinTarget, Toxin, parse_corpus, split
from tipformer.errors import DataError, FormatError, NumericError, TipFormerError, UsageError
from tipformer.model import ModelConfig, TipFormer, extract_hotspots, predict_pair
from tipformer.training import TrainConfig, fit, load_checkpoint, save_checkpoint

__all__ = [
    "Corpus",
    "DataError",
    "DatasetSplit",
    "FormatError",
    "InteractionPair",
    "ModelConfig",
    "NumericError",
    "ProteinTarget",
    "TipFormer",
    "TipFormerError",
    "Toxin",
    "TrainConfig",
    "UsageError",
    "extract_hotspots",
    "fit",
    "load_checkpoint",
    "parse_corpus",
    "predict_pair",
    "save_checkpoint",
    "split",
]
