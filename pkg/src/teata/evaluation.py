"""Retrieval evaluation: feature extraction with the image encoder only,
cosine-distance ranking under standard or cloth-changing junk filtering,
mAP / CMC scoring, seen/unseen group averages, forgetting matrices, and
embedding export.

Junk rules: gallery items sharing the query's identity and camera never
count; under the CC protocol, same-identity same-clothing items are junk as
well, so only cloth-changing matches score.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .data import DataAccessAudit, DomainDataset
from .encoders import ImageEncoder
from .errors import EmptyGallery, InvalidArgument

PROTOCOLS = ("STANDARD", "CC")


@dataclass
class FeatureSet:
    """Projected features with per-row identity/camera/clothing metadata."""

    features: np.ndarray
    identities: np.ndarray
    cameras: np.ndarray
    clothing_ids: np.ndarray

    def __len__(self) -> int:
        return self.features.shape[0]


def extract_features(
    encoder: ImageEncoder,
    dataset: DomainDataset,
    split: str,
    *,
    batch_size: int = 64,
    audit: DataAccessAudit | None = None,
) -> FeatureSet:
    """Projected, unnormalized features for one split in manifest order."""
    encoder.eval()
    records = dataset.records_for(split)
    feats = np.zeros((len(records), encoder.embed_dim), dtype=np.float32)
    with torch.no_grad():
        for start in range(0, len(records), batch_size):
            chunk = records[start : start + batch_size]
            images = dataset.load_images(chunk, audit=audit)
            _, projected = encoder(torch.from_numpy(images))
            feats[start : start + len(chunk)] = projected.numpy()
    return FeatureSet(
        features=feats,
        identities=np.asarray([r.identity for r in records], dtype=np.int64),
        cameras=np.asarray([r.camera for r in records], dtype=np.int64),
        clothing_ids=np.asarray([r.clothing_id for r in records], dtype=np.int64),
    )


def _normalized(rows: np.ndarray) -> np.ndarray:
    rows = rows.astype(np.float64)
    norms = np.linalg.norm(rows, axis=1, keepdims=True)
    return rows / np.where(norms > 0, norms, 1.0)


def rank_and_score(
    query: FeatureSet,
    gallery: FeatureSet,
    protocol: str = "STANDARD",
    max_rank: int = 20,
) -> dict:
    """Cosine-distance ranking with junk filtering.

    AP per query is the mean of precision at each valid hit; queries whose
    valid matches are all junk-filtered away are dropped and counted. Ties
    break by gallery index (stable sort).
    """
    if protocol not in PROTOCOLS:
        raise InvalidArgument(f"protocol must be one of {PROTOCOLS}")
    if len(gallery) == 0:
        raise EmptyGallery("gallery has no records")
    max_rank = min(max_rank, len(gallery))

    distances = 1.0 - _normalized(query.features) @ _normalized(gallery.features).T

    aps = []
    cmc = np.zeros(max_rank, dtype=np.float64)
    dropped = 0
    for i in range(len(query)):
        order = np.argsort(distances[i], kind="stable")
        junk = (gallery.identities == query.identities[i]) & (
            gallery.cameras == query.cameras[i]
        )
        if protocol == "CC":
            junk |= (gallery.identities == query.identities[i]) & (
                gallery.clothing_ids == query.clothing_ids[i]
            )
        kept = order[~junk[order]]
        matches = gallery.identities[kept] == query.identities[i]
        if not matches.any():
            dropped += 1
            continue
        ranks = np.flatnonzero(matches) + 1
        precisions = np.arange(1, len(ranks) + 1) / ranks
        aps.append(precisions.mean())
        if ranks[0] <= max_rank:
            cmc[ranks[0] - 1 :] += 1.0

    retained = len(aps)
    if retained == 0:
        mean_ap, cmc_list = 0.0, [0.0] * max_rank
    else:
        mean_ap = float(np.mean(aps))
        cmc_list = [float(v) for v in cmc / retained]
    return {
        "protocol": protocol,
        "mAP": mean_ap,
        "rank1": cmc_list[0] if cmc_list else 0.0,
        "cmc": cmc_list,
        "dropped_queries": dropped,
        "num_queries": len(query),
    }


def evaluate_domain(
    encoder: ImageEncoder,
    dataset: DomainDataset,
    protocol: str | None = None,
    *,
    max_rank: int = 20,
    audit: DataAccessAudit | None = None,
) -> dict:
    """Full query-vs-gallery evaluation of one domain; CC domains default to
    the cloth-changing protocol."""
    if protocol is None:
        protocol = "CC" if dataset.clothing_state == "CC" else "STANDARD"
    query = extract_features(encoder, dataset, "query", audit=audit)
    gallery = extract_features(encoder, dataset, "gallery", audit=audit)
    report = rank_and_score(query, gallery, protocol, max_rank=max_rank)
    report["domain"] = dataset.name
    return report


def aggregate(reports: list[dict]) -> dict:
    """Unweighted group means over (seen|unseen) x (SC|CC).

    Each input carries "clothing_state" and "seen" alongside its metrics.
    Groups with no member domains are omitted, never reported as zero.
    """
    groups: dict[str, list[dict]] = {}
    for report in reports:
        seen = "seen" if report["seen"] else "unseen"
        state = report["clothing_state"].lower()
        groups.setdefault(f"{seen}_{state}", []).append(report)
    out = {}
    for key, members in sorted(groups.items()):
        out[key] = {
            "mAP": float(np.mean([m["mAP"] for m in members])),
            "rank1": float(np.mean([m["rank1"] for m in members])),
            "domains": [m["domain"] for m in members],
        }
    return out


def forgetting_matrix(step_reports: list[dict[str, dict]], domains: list[str]) -> dict:
    """Lower-triangular per-step metric matrix and the forgetting vector
    F_i = max_t A[t][i] - A[T][i] for each seen domain."""
    out = {}
    T = len(step_reports)
    for metric in ("mAP", "rank1"):
        matrix = [[None] * len(domains) for _ in range(T)]
        for t, reports in enumerate(step_reports):
            for i, name in enumerate(domains):
                if i <= t and name in reports:
                    matrix[t][i] = reports[name][metric]
        forgetting = []
        for i, name in enumerate(domains):
            column = [matrix[t][i] for t in range(T) if matrix[t][i] is not None]
            if not column:
                forgetting.append(None)
            else:
                forgetting.append(max(column) - column[-1])
        out[metric] = {"matrix": matrix, "forgetting": forgetting}
    out["domains"] = list(domains)
    return out


def export_embeddings(
    encoder: ImageEncoder,
    datasets: list[DomainDataset],
    out_path: str | Path,
    *,
    batch_size: int = 64,
    audit: DataAccessAudit | None = None,
) -> Path:
    """One JSON line per sample plus per-identity mean rows flagged as
    split="prototype"."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    encoder.eval()
    with out_path.open("w") as fh:
        for dataset in datasets:
            by_identity: dict[int, list[np.ndarray]] = {}
            for split in ("train", "query", "gallery"):
                records = dataset.records_for(split)
                if not records:
                    continue
                feats = extract_features(
                    encoder, dataset, split, batch_size=batch_size, audit=audit
                )
                for rec, row in zip(records, feats.features):
                    fh.write(
                        json.dumps(
                            {
                                "domain": dataset.name,
                                "identity": rec.identity,
                                "clothing_id": rec.clothing_id,
                                "split": rec.split,
                                "feature": [float(v) for v in row],
                            }
                        )
                        + "\n"
                    )
                    by_identity.setdefault(rec.identity, []).append(row)
            for identity in sorted(by_identity):
                mean = np.stack(by_identity[identity]).mean(axis=0)
                fh.write(
                    json.dumps(
                        {
                            "domain": dataset.name,
                            "identity": identity,
                            "clothing_id": None,
                            "split": "prototype",
                            "feature": [float(v) for v in mean],
                        }
                    )
                    + "\n"
                )
    return out_path
