"""Training objectives: bidirectional image-text contrastive alignment,
identity cross-entropy with label smoothing against classifier/text rows,
the frozen-table projection loss, batch-hard triplet, and the weighted
stage-2 composite.

All functions are pure over their tensor inputs and dtype-agnostic, so the
same code path runs in float64 for finite-difference checks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import (
    DegenerateBatch,
    InvalidArgument,
    LabelOutOfRange,
    NonFiniteError,
    ShapeError,
)


@dataclass(frozen=True)
class LossWeights:
    """Stage-2 balance coefficients plus smoothing and margin constants."""

    lambda1: float = 1.0
    lambda2: float = 0.25
    lambda3: float = 1.0
    epsilon: float = 0.1
    triplet_margin: float = 0.3

    def __post_init__(self) -> None:
        for name in ("lambda1", "lambda2", "lambda3", "triplet_margin"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise InvalidArgument(f"{name} must be a finite non-negative real, got {value}")
        if not 0.0 <= self.epsilon < 1.0:
            raise InvalidArgument(f"epsilon must lie in [0, 1), got {self.epsilon}")


def _check_features(features: torch.Tensor, name: str) -> None:
    if features.dim() != 2:
        raise ShapeError(f"{name} must be 2-D (rows, dim), got {tuple(features.shape)}")
    if not torch.isfinite(features).all():
        raise NonFiniteError(f"{name} contains non-finite values")


def _check_labels(labels: torch.Tensor, batch: int, num_classes: int) -> None:
    if labels.dim() != 1 or labels.shape[0] != batch:
        raise ShapeError(f"labels must be ({batch},), got {tuple(labels.shape)}")
    if labels.numel() and (labels.min() < 0 or labels.max() >= num_classes):
        raise LabelOutOfRange(
            f"labels must lie in [0, {num_classes}), got range "
            f"[{int(labels.min())}, {int(labels.max())}]"
        )


def smoothed_targets(num_classes: int, labels: torch.Tensor, epsilon: float) -> torch.Tensor:
    """Label-smoothed target rows: 1 - eps + eps/N on the true class,
    eps/N elsewhere; every row sums to 1."""
    if num_classes <= 0:
        raise ShapeError("num_classes must be positive")
    _check_labels(labels, labels.shape[0], num_classes)
    base = torch.full((labels.shape[0], num_classes), epsilon / num_classes, dtype=torch.float64)
    base[torch.arange(labels.shape[0]), labels] = 1.0 - epsilon + epsilon / num_classes
    return base


def contrastive_alignment(
    image_features: torch.Tensor,
    text_table: torch.Tensor,
    labels: torch.Tensor,
    temperature: torch.Tensor | float,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Bidirectional image-text alignment losses (image-to-text, text-to-image).

    Both sides are L2-normalized internally and compared at the given
    temperature. The image-to-text term is a softmax cross-entropy over the
    identity rows. The text-to-image term handles multiple positives per
    identity by averaging log-probabilities over that identity's images, then
    averaging over the identities present in the batch.
    """
    _check_features(image_features, "image_features")
    _check_features(text_table, "text_table")
    if image_features.shape[0] < 2:
        raise ShapeError("contrastive alignment needs a batch of at least 2 images")
    if image_features.shape[1] != text_table.shape[1]:
        raise ShapeError(
            f"feature width {image_features.shape[1]} != table width {text_table.shape[1]}"
        )
    _check_labels(labels, image_features.shape[0], text_table.shape[0])

    img = F.normalize(image_features, dim=1)
    txt = F.normalize(text_table, dim=1)
    logits_i2t = img @ txt.T / temperature

    loss_i2t = F.cross_entropy(logits_i2t, labels)

    log_probs_t2i = F.log_softmax(logits_i2t.T, dim=1)  # (N, B)
    positives = labels.unsqueeze(0) == torch.arange(
        text_table.shape[0], device=labels.device
    ).unsqueeze(1)
    present = positives.any(dim=1)
    per_identity = (log_probs_t2i * positives).sum(dim=1) / positives.sum(dim=1).clamp(min=1)
    loss_t2i = -per_identity[present].mean()

    for loss, name in ((loss_i2t, "image-to-text"), (loss_t2i, "text-to-image")):
        if not torch.isfinite(loss):
            raise NonFiniteError(f"{name} loss is non-finite")
    return loss_i2t, loss_t2i


def id_loss(
    features: torch.Tensor,
    classifier: torch.Tensor,
    labels: torch.Tensor,
    epsilon: float = 0.1,
) -> torch.Tensor:
    """Label-smoothed cross-entropy of L2-normalized features against
    classifier rows (used as-is, no temperature)."""
    _check_features(features, "features")
    _check_features(classifier, "classifier")
    if features.shape[1] != classifier.shape[1]:
        raise ShapeError(
            f"feature width {features.shape[1]} != classifier width {classifier.shape[1]}"
        )
    _check_labels(labels, features.shape[0], classifier.shape[0])

    logits = F.normalize(features, dim=1) @ classifier.T
    log_probs = F.log_softmax(logits, dim=1)
    targets = smoothed_targets(classifier.shape[0], labels, epsilon).to(log_probs.dtype)
    return -(targets * log_probs).sum(dim=1).mean()


def proj_loss(
    features: torch.Tensor,
    frozen_text_table: torch.Tensor,
    labels: torch.Tensor,
    epsilon: float = 0.1,
) -> torch.Tensor:
    """id_loss against the stage-2-start text table; the table never
    receives gradient."""
    return id_loss(features, frozen_text_table.detach(), labels, epsilon)


def triplet_loss(
    features: torch.Tensor,
    labels: torch.Tensor,
    margin: float = 0.3,
) -> torch.Tensor:
    """Batch-hard triplet on unnormalized Euclidean distances: per anchor,
    hardest positive minus hardest negative, hinged at the margin."""
    _check_features(features, "features")
    if labels.dim() != 1 or labels.shape[0] != features.shape[0]:
        raise ShapeError(f"labels must be ({features.shape[0]},), got {tuple(labels.shape)}")
    same = labels.unsqueeze(0) == labels.unsqueeze(1)
    if bool(same.all()):
        raise DegenerateBatch("triplet loss needs at least two identities in the batch")

    norms = features.pow(2).sum(dim=1)
    sq = (norms.unsqueeze(0) + norms.unsqueeze(1) - 2.0 * features @ features.T).clamp(min=0)
    # Clamped sqrt keeps the gradient finite at coincident pairs.
    dist = sq.clamp(min=1e-12).sqrt()
    neg_inf = torch.finfo(dist.dtype).min
    pos_inf = torch.finfo(dist.dtype).max
    hardest_pos = dist.masked_fill(~same, neg_inf).max(dim=1).values
    hardest_neg = dist.masked_fill(same, pos_inf).min(dim=1).values
    return F.relu(hardest_pos - hardest_neg + margin).mean()


@dataclass
class Stage2Terms:
    """Per-batch stage-2 components: projection loss on projected features,
    identity losses on pre-projection and projected features, triplet losses
    on both feature levels."""

    proj: torch.Tensor
    id_pre: torch.Tensor
    id_proj: torch.Tensor
    tri_pre: torch.Tensor
    tri_proj: torch.Tensor


def stage2_total(terms: Stage2Terms, weights: LossWeights) -> torch.Tensor:
    return (
        weights.lambda1 * terms.proj
        + weights.lambda2 * (terms.id_pre + terms.id_proj)
        + weights.lambda3 * (terms.tri_pre + terms.tri_proj)
    )
