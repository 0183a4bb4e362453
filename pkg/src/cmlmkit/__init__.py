"""Conditional masked language modeling for sentence embeddings, desk scale.

Everything runs on a self-contained numpy autodiff engine: a siamese
transformer encoder trained to denoise one sentence while conditioned on a
projected embedding of its neighbor, optionally co-trained with in-batch
translation retrieval and finetuned on cross-lingual inference pairs.
Post-training tools cover cosine retrieval, principal-component debiasing,
linear probes, rank correlation, and 2-d visualization.
"""

from .config import RunConfig
from .estimators import (LogisticProbe, PlanarProjector,
                         PrincipalComponentRemover, SentenceEncoder)
from .evaluation import (EmbeddingSet, cosine_similarity, export_2d,
                         language_bias_histogram, linear_probe,
                         load_embeddings, pcr_debias, retrieval_accuracy,
                         save_embeddings, spearman_correlation)
from .model import EncoderConfig, embed_sentence, embed_texts
from .training import TrainPlan, load_checkpoint, run_plan, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "EmbeddingSet",
    "EncoderConfig",
    "LogisticProbe",
    "PlanarProjector",
    "PrincipalComponentRemover",
    "RunConfig",
    "SentenceEncoder",
    "TrainPlan",
    "cosine_similarity",
    "embed_sentence",
    "embed_texts",
    "export_2d",
    "language_bias_histogram",
    "linear_probe",
    "load_checkpoint",
    "load_embeddings",
    "pcr_debias",
    "retrieval_accuracy",
    "run_plan",
    "save_checkpoint",
    "save_embeddings",
    "spearman_correlation",
]
