"""Lifelong person re-identification across hybrid clothing states.

Two-stage per-domain training that distills image features into structured
text prompts and then guides the image encoder from the text space, with a
slow-paced learner to limit forgetting; plus synthetic SC/CC domains, P x K
sampling, retrieval metrics, and a full experiment CLI.
"""

from .config import RunConfig, load_config
from .data import (
    BatchSpec,
    DataAccessAudit,
    DomainDataset,
    SampleRecord,
    generate_synthetic_domain,
    load_domain,
    sample_pk_batches,
)
from .encoders import ContrastiveTemperature, ImageEncoder, PromptSequence, TextEncoder
from .evaluation import aggregate, extract_features, forgetting_matrix, rank_and_score
from .kap import AdaptedClassifier, SlowPacedSchedule, image_prototypes, init_classifier
from .lifelong import StepResult, TrainState, build_state, run_plan
from .losses import LossWeights, contrastive_alignment, id_loss, proj_loss, triplet_loss
from .prompts import StructuredPromptStore

__all__ = [
    "AdaptedClassifier",
    "BatchSpec",
    "ContrastiveTemperature",
    "DataAccessAudit",
    "DomainDataset",
    "ImageEncoder",
    "LossWeights",
    "PromptSequence",
    "RunConfig",
    "SampleRecord",
    "SlowPacedSchedule",
    "StepResult",
    "StructuredPromptStore",
    "TextEncoder",
    "TrainState",
    "aggregate",
    "build_state",
    "contrastive_alignment",
    "extract_features",
    "forgetting_matrix",
    "generate_synthetic_domain",
    "id_loss",
    "image_prototypes",
    "init_classifier",
    "load_config",
    "load_domain",
    "proj_loss",
    "rank_and_score",
    "run_plan",
    "sample_pk_batches",
    "triplet_loss",
]

__version__ = "0.1.0"
