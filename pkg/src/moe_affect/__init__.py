"""Mixture-of-experts emotion recognition over precomputed multimodal embeddings."""

__version__ = "0.1.0"

from .data import (BranchSpec, DataFormatError, EmbeddingBundle, PredictionSet, VlmKnowledgeRecord,  # noqa: E402
                   read_bundle, read_predictions, read_vlm_records, write_bundle, write_predictions)
from .estimator import MoEClassifier, NeutralReranker, ReliabilityVoter  # noqa: E402
from .model import MoeConfig, MoeModel  # noqa: E402
from .taxonomy import EMOTIONS  # noqa: E402
from .training import TrainConfig  # noqa: E402

__all__ = [
    "BranchSpec", "DataFormatError", "EMOTIONS", "EmbeddingBundle", "MoEClassifier", "MoeConfig", "MoeModel",
    "NeutralReranker", "PredictionSet", "ReliabilityVoter", "TrainConfig", "VlmKnowledgeRecord",
    "read_bundle", "read_predictions", "read_vlm_records", "write_bundle", "write_predictions",
]
