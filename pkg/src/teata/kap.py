"""Knowledge adaptation and projection: the per-domain adapted classifier
with its three initialization modes, image-prototype computation, the
slow-paced learning-rate plans, and stage-2 gradient routing for prompts.

The adapted classifier is a free tensor trained by the identity loss at the
slow-paced rate; initialization either copies the row-normalized text table
(KA_T), the row-normalized image prototypes (KA_V), or draws a seeded
truncated normal (RANDOM).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .data import DataAccessAudit, DomainDataset
from .encoders import ImageEncoder, seeded_trunc_normal_
from .errors import EmptyIdentity, InvalidArgument, InvalidEpoch, MissingSource, ShapeError
from .prompts import StructuredPromptStore

INIT_MODES = ("KA_T", "KA_V", "RANDOM")


class AdaptedClassifier(nn.Module):
    """Trainable (N, d) row-per-identity classifier."""

    def __init__(self, weight: torch.Tensor, init_mode: str):
        super().__init__()
        self.weight = nn.Parameter(weight)
        self.init_mode = init_mode

    @property
    def num_identities(self) -> int:
        return self.weight.shape[0]


def init_classifier(
    mode: str,
    *,
    text_table: torch.Tensor | None = None,
    image_prototypes: torch.Tensor | None = None,
    num_identities: int | None = None,
    embed_dim: int | None = None,
    seed: int = 0,
) -> AdaptedClassifier:
    """Build the adapted classifier for one domain.

    KA_T copies the row-normalized text table, KA_V the row-normalized image
    prototypes, RANDOM draws a seeded truncated normal and row-normalizes it.
    """
    if mode not in INIT_MODES:
        raise InvalidArgument(f"init mode must be one of {INIT_MODES}, got {mode!r}")
    if mode == "KA_T":
        if text_table is None:
            raise MissingSource("KA_T initialization needs the stage-1 text table")
        source = text_table
    elif mode == "KA_V":
        if image_prototypes is None:
            raise MissingSource("KA_V initialization needs image prototypes")
        source = image_prototypes
    else:
        if num_identities is None or embed_dim is None:
            raise MissingSource("RANDOM initialization needs num_identities and embed_dim")
        source = seeded_trunc_normal_(
            torch.empty(num_identities, embed_dim), std=0.02, seed=seed
        )
    if source.dim() != 2:
        raise ShapeError(f"classifier source must be (N, d), got {tuple(source.shape)}")
    weight = F.normalize(source.detach().clone(), dim=1)
    return AdaptedClassifier(weight, init_mode=mode)


def image_prototypes(
    encoder: ImageEncoder,
    dataset: DomainDataset,
    *,
    batch_size: int = 64,
    audit: DataAccessAudit | None = None,
) -> torch.Tensor:
    """Mean projected feature per identity over its train images, computed
    with the encoder in eval mode and no augmentation."""
    encoder.eval()
    by_identity = dataset.train_indices_by_identity()
    for identity in range(dataset.num_identities):
        if identity not in by_identity:
            raise EmptyIdentity(f"identity {identity} has no train images")

    sums = torch.zeros(dataset.num_identities, encoder.embed_dim)
    counts = torch.zeros(dataset.num_identities)
    train = [(i, rec) for i, rec in enumerate(dataset.records) if rec.split == "train"]
    with torch.no_grad():
        for start in range(0, len(train), batch_size):
            chunk = train[start : start + batch_size]
            images = dataset.load_images([rec for _, rec in chunk], audit=audit)
            _, feats = encoder(torch.from_numpy(images))
            for (_, rec), feat in zip(chunk, feats):
                sums[rec.identity] += feat
                counts[rec.identity] += 1
    return sums / counts.unsqueeze(1)


# ---------------------------------------------------------------------------
# Learning-rate plans
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SlowPacedSchedule:
    """Stage-wise learning-rate plans with a x1/slow_factor pace for every
    domain after the first."""

    stage1_base_lr: float = 3.5e-4
    stage2_warmup_start: float = 5e-7
    stage2_peak_lr: float = 5e-6
    stage2_warmup_epochs: int = 10
    stage2_decay_epoch: int = 40
    stage2_decay_factor: float = 0.1
    stage2_max_epochs: int = 60
    slow_factor: float = 10.0


def stage2_learning_rate(schedule: SlowPacedSchedule, domain_index: int, epoch: int) -> float:
    """LR for a stage-2 epoch: linear warmup to the peak, constant plateau,
    a step decay, and the whole plan divided by slow_factor from the second
    domain on."""
    if domain_index < 1:
        raise InvalidArgument("domain_index is 1-based")
    if not 0 <= epoch < schedule.stage2_max_epochs:
        raise InvalidEpoch(
            f"epoch {epoch} outside [0, {schedule.stage2_max_epochs})"
        )
    if epoch < schedule.stage2_warmup_epochs:
        span = schedule.stage2_peak_lr - schedule.stage2_warmup_start
        lr = schedule.stage2_warmup_start + span * epoch / max(schedule.stage2_warmup_epochs - 1, 1)
    elif epoch < schedule.stage2_decay_epoch:
        lr = schedule.stage2_peak_lr
    else:
        lr = schedule.stage2_peak_lr * schedule.stage2_decay_factor
    if domain_index >= 2:
        lr = lr / schedule.slow_factor
    return lr


def stage1_learning_rate(schedule: SlowPacedSchedule, epoch: int, total_epochs: int) -> float:
    """Cosine decay from the stage-1 base rate over the configured epochs."""
    if total_epochs <= 0:
        raise InvalidArgument("total_epochs must be positive")
    if not 0 <= epoch < total_epochs:
        raise InvalidEpoch(f"epoch {epoch} outside [0, {total_epochs})")
    return schedule.stage1_base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def stage2_prompt_tuning_hook(
    store: StructuredPromptStore,
    domain_step: int,
    enabled: bool,
    which: str = "both",
) -> list[nn.Parameter]:
    """Gradient routing for stage-2 prompt tuning.

    When enabled, returns the prompt parameters to add to the slow-paced
    optimizer group (the text encoder stays frozen either way); when
    disabled, marks them untrainable for the stage and returns nothing.
    """
    params = store.parameters_for_tuning(domain_step, which)
    for param in params:
        param.requires_grad_(enabled)
    return params if enabled else []
