"""Cloze question answering: data, the four attention variants, training."""

from linattn.qa.data import (
    Batch,
    ClozeExample,
    IngestError,
    Vocabulary,
    generate_synthetic_cloze,
    ingest_examples,
    iter_batches,
)
from linattn.qa.model import MODES, ModelParams, cross_entropy_loss, init_params, model_forward
from linattn.qa.train import AdamState, TrainConfig, TrainingDiverged, adam_step, evaluate, train

__all__ = [
    "Batch",
    "ClozeExample",
    "IngestError",
    "Vocabulary",
    "generate_synthetic_cloze",
    "ingest_examples",
    "iter_batches",
    "MODES",
    "ModelParams",
    "cross_entropy_loss",
    "init_params",
    "model_forward",
    "AdamState",
    "TrainConfig",
    "TrainingDiverged",
    "adam_step",
    "evaluate",
    "train",
]
