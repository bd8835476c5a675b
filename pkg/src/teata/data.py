"""Dataset model, on-disk manifest format, synthetic domain generator, and
identity-balanced (P x K) batch sampling.

A domain lives in one directory:

    meta.json       {"name", "clothing_state", "num_identities",
                     "image_height", "image_width"}
    manifest.jsonl  one record per line: {"image_path", "identity", "camera",
                     "clothing_id", "split"}
    images/*.png    8-bit RGB

"SC" domains keep one outfit per identity; "CC" domains guarantee at least
two outfits for every identity so that cloth-changing retrieval is testable.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import (
    DataLeakError,
    InvalidArgument,
    MissingFile,
    ProtocolError,
    SchemaError,
)

SPLITS = ("train", "query", "gallery")
CLOTHING_STATES = ("SC", "CC")

META_FILE = "meta.json"
MANIFEST_FILE = "manifest.jsonl"


@dataclass(frozen=True)
class SampleRecord:
    """One image with its identity, camera, outfit, and protocol split."""

    image_path: str
    identity: int
    camera: int
    clothing_id: int
    split: str


@dataclass(frozen=True)
class BatchSpec:
    """P x K batch layout: batch_size images, K per identity."""

    batch_size: int = 64
    instances_per_identity: int = 4

    def __post_init__(self) -> None:
        if self.batch_size <= 0 or self.instances_per_identity <= 0:
            raise InvalidArgument("batch_size and instances_per_identity must be positive")
        if self.batch_size % self.instances_per_identity != 0:
            raise InvalidArgument(
                f"batch_size {self.batch_size} is not a multiple of "
                f"instances_per_identity {self.instances_per_identity}"
            )

    @property
    def identities_per_batch(self) -> int:
        return self.batch_size // self.instances_per_identity


class DataAccessAudit:
    """Chronological log of image reads with a no-revisit rule for train data.

    Once ``complete_train(domain)`` is called, any further read of that
    domain's train split raises DataLeakError. Query/gallery reads stay legal
    (evaluation revisits every seen domain).
    """

    def __init__(self) -> None:
        self.events: list[tuple[str, str, str]] = []
        self._train_done: set[str] = set()

    def record_read(self, domain: str, split: str, image_path: str) -> None:
        if split == "train" and domain in self._train_done:
            raise DataLeakError(
                f"train split of completed domain {domain!r} was accessed "
                f"(image {image_path!r})"
            )
        self.events.append(("read", domain, split))

    def complete_train(self, domain: str) -> None:
        self._train_done.add(domain)
        self.events.append(("complete", domain, "train"))

    def train_reads_after_completion(self, domain: str) -> int:
        """Count train reads of ``domain`` logged after its completion event."""
        count = 0
        done = False
        for kind, dom, split in self.events:
            if kind == "complete" and dom == domain:
                done = True
            elif done and kind == "read" and dom == domain and split == "train":
                count += 1
        return count


@dataclass
class DomainDataset:
    """Immutable view of one domain; safe for concurrent reads after load."""

    name: str
    clothing_state: str
    num_identities: int
    records: tuple[SampleRecord, ...]
    image_height: int
    image_width: int
    root: Path
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def records_for(self, split: str) -> list[SampleRecord]:
        if split not in SPLITS:
            raise SchemaError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def train_indices_by_identity(self) -> dict[int, list[int]]:
        by_id: dict[int, list[int]] = defaultdict(list)
        for i, rec in enumerate(self.records):
            if rec.split == "train":
                by_id[rec.identity].append(i)
        return dict(by_id)

    def load_images(
        self,
        records: Sequence[SampleRecord],
        audit: Optional[DataAccessAudit] = None,
    ) -> np.ndarray:
        """Decode ``records`` into a float32 (B, H, W, 3) array in [0, 1].

        Decoded pixels are cached; the audit fires on every logical read so
        caching cannot mask a data-leak violation.
        """
        out = np.empty((len(records), self.image_height, self.image_width, 3), dtype=np.float32)
        for i, rec in enumerate(records):
            if audit is not None:
                audit.record_read(self.name, rec.split, rec.image_path)
            pixels = self._cache.get(rec.image_path)
            if pixels is None:
                path = self.root / rec.image_path
                if not path.is_file():
                    raise MissingFile(f"image file missing: {path}")
                with Image.open(path) as img:
                    pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
                self._cache[rec.image_path] = pixels
            out[i] = pixels.astype(np.float32) / 255.0
        return out


# ---------------------------------------------------------------------------
# Manifest I/O
# ---------------------------------------------------------------------------

def _require_int(obj: dict, key: str, context: str, minimum: int = 0) -> int:
    value = obj.get(key)
    if not isinstance(value, int) or isinstance(value, bool) or value < minimum:
        raise SchemaError(f"{context}: field {key!r} must be an integer >= {minimum}, got {value!r}")
    return value


def load_domain(root: str | Path, audit: Optional[DataAccessAudit] = None) -> DomainDataset:
    """Load and validate a domain directory.

    Identities are relabeled to a contiguous 0..N-1 range built from the
    train split; query/gallery identities must be a subset of the train
    identities. Any invariant violation is rejected.
    """
    root = Path(root)
    meta_path = root / META_FILE
    manifest_path = root / MANIFEST_FILE
    if not meta_path.is_file():
        raise MissingFile(f"missing {META_FILE} under {root}")
    if not manifest_path.is_file():
        raise MissingFile(f"missing {MANIFEST_FILE} under {root}")

    try:
        meta = json.loads(meta_path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{meta_path}: invalid JSON ({exc})") from exc
    name = meta.get("name")
    if not isinstance(name, str) or not name:
        raise SchemaError(f"{meta_path}: 'name' must be a non-empty string")
    clothing_state = meta.get("clothing_state")
    if clothing_state not in CLOTHING_STATES:
        raise SchemaError(f"{meta_path}: 'clothing_state' must be one of {CLOTHING_STATES}")
    num_identities = _require_int(meta, "num_identities", str(meta_path), minimum=1)
    height = _require_int(meta, "image_height", str(meta_path), minimum=1)
    width = _require_int(meta, "image_width", str(meta_path), minimum=1)

    raw: list[SampleRecord] = []
    with manifest_path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            ctx = f"{manifest_path}:{lineno}"
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"{ctx}: invalid JSON ({exc})") from exc
            image_path = obj.get("image_path")
            if not isinstance(image_path, str) or not image_path:
                raise SchemaError(f"{ctx}: 'image_path' must be a non-empty string")
            split = obj.get("split")
            if split not in SPLITS:
                raise SchemaError(f"{ctx}: unknown split value {split!r}")
            raw.append(
                SampleRecord(
                    image_path=image_path,
                    identity=_require_int(obj, "identity", ctx),
                    camera=_require_int(obj, "camera", ctx),
                    clothing_id=_require_int(obj, "clothing_id", ctx),
                    split=split,
                )
            )
    if not raw:
        raise SchemaError(f"{manifest_path}: manifest is empty")

    for rec in raw:
        if not (root / rec.image_path).is_file():
            raise MissingFile(f"manifest references missing image {rec.image_path!r} under {root}")

    train_ids = sorted({r.identity for r in raw if r.split == "train"})
    if len(train_ids) != num_identities:
        raise SchemaError(
            f"{root}: meta declares {num_identities} identities but the train "
            f"split contains {len(train_ids)}"
        )
    relabel = {old: new for new, old in enumerate(train_ids)}
    records = []
    for rec in raw:
        if rec.identity not in relabel:
            raise SchemaError(
                f"{root}: identity {rec.identity} appears in split {rec.split!r} "
                f"but not in the train split"
            )
        records.append(replace(rec, identity=relabel[rec.identity]))

    dataset = DomainDataset(
        name=name,
        clothing_state=clothing_state,
        num_identities=num_identities,
        records=tuple(records),
        image_height=height,
        image_width=width,
        root=root,
    )
    _validate_protocol(dataset)
    return dataset


def _validate_protocol(dataset: DomainDataset) -> None:
    outfits: dict[int, set[int]] = defaultdict(set)
    for rec in dataset.records:
        outfits[rec.identity].add(rec.clothing_id)
    if dataset.clothing_state == "SC":
        for identity, ids in outfits.items():
            if len(ids) > 1:
                raise ProtocolError(
                    f"{dataset.name}: SC domain but identity {identity} has "
                    f"clothing_ids {sorted(ids)}"
                )
    else:
        if not any(len(ids) >= 2 for ids in outfits.values()):
            raise ProtocolError(
                f"{dataset.name}: CC domain but no identity has two distinct clothing_ids"
            )
    gallery_ids = {r.identity for r in dataset.records if r.split == "gallery"}
    for rec in dataset.records:
        if rec.split == "query" and rec.identity not in gallery_ids:
            raise ProtocolError(
                f"{dataset.name}: query identity {rec.identity} never appears in the gallery"
            )


# ---------------------------------------------------------------------------
# Synthetic domain generator
# ---------------------------------------------------------------------------

# Body patterns occupy the upper half, clothing the lower half, so a
# clothing-blind oracle can be built by masking rows >= H/2.
#
# Clothing colors come from a domain wardrobe: one color set per identity in
# SC domains (clothing strongly identifies people), a small shared pool in CC
# domains (clothing misleads across identities), mirroring how useful clothes
# are under each protocol.
_BODY_GRID = (4, 4)
_CLOTH_GRID = (2, 2)
_CC_OUTFITS = 3
_CC_WARDROBE = 4


def _fill_grid(canvas: np.ndarray, colors: np.ndarray, grid: tuple[int, int]) -> None:
    rows, cols = grid
    h, w = canvas.shape[0], canvas.shape[1]
    for r in range(rows):
        for c in range(cols):
            r0, r1 = r * h // rows, (r + 1) * h // rows
            c0, c1 = c * w // cols, (c + 1) * w // cols
            canvas[r0:r1, c0:c1] = colors[r * cols + c]


def _camera_tint(camera: int) -> np.ndarray:
    # Fixed per-camera channel gains, independent of the domain seed.
    rng = np.random.default_rng([7919, camera])
    return rng.uniform(0.78, 1.0, size=3)


def generate_synthetic_domain(
    root: str | Path,
    *,
    name: str,
    seed: int,
    num_identities: int,
    images_per_identity: int,
    clothing_state: str,
    num_cameras: int = 3,
    noise_std: float = 0.05,
    image_height: int = 64,
    image_width: int = 32,
) -> DomainDataset:
    """Generate a synthetic domain on disk and return the loaded dataset.

    Every identity keeps a persistent body pattern in the upper image half;
    the lower half carries the clothing pattern (fixed per identity for SC,
    cycled through a small outfit pool for CC). Cameras apply fixed global
    tints and the whole domain gets a seed-dependent color cast, so domains
    built from different seeds are genuinely shifted. Identical arguments
    produce byte-identical files.
    """
    if clothing_state not in CLOTHING_STATES:
        raise InvalidArgument(f"clothing_state must be one of {CLOTHING_STATES}")
    if num_identities < 2:
        raise InvalidArgument("need at least 2 identities")
    if images_per_identity < 3:
        raise InvalidArgument(
            "need at least 3 images per identity to fill train, query, and gallery"
        )
    if num_cameras < 2:
        raise InvalidArgument("need at least 2 cameras for cross-camera matches")
    if seed < 0:
        raise InvalidArgument("seed must be non-negative")

    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)

    outfits = 1 if clothing_state == "SC" else min(_CC_OUTFITS, images_per_identity)
    wardrobe_size = num_identities if clothing_state == "SC" else min(_CC_WARDROBE, num_identities)
    wardrobe = [
        np.random.default_rng([seed, 23, w]).uniform(
            0.0, 1.0, size=(_CLOTH_GRID[0] * _CLOTH_GRID[1], 3)
        )
        for w in range(wardrobe_size)
    ]
    style_cast = np.random.default_rng([seed, 5]).uniform(-0.18, 0.18, size=3)
    channel_mix = np.eye(3) + np.random.default_rng([seed, 7]).uniform(-0.35, 0.35, size=(3, 3))
    tints = [_camera_tint(c) for c in range(num_cameras)]

    half = image_height // 2
    n_train = images_per_identity // 2
    records: list[SampleRecord] = []

    for identity in range(num_identities):
        body = np.random.default_rng([seed, 11, identity]).uniform(
            0.0, 1.0, size=(_BODY_GRID[0] * _BODY_GRID[1], 3)
        )
        for idx in range(images_per_identity):
            outfit = 0 if clothing_state == "SC" else idx % outfits
            clothing_id = identity if clothing_state == "SC" else identity * outfits + outfit
            cloth_colors = wardrobe[(identity + outfit) % wardrobe_size]
            camera = (identity + idx) % num_cameras

            img = np.empty((image_height, image_width, 3), dtype=np.float64)
            _fill_grid(img[:half], body, _BODY_GRID)
            _fill_grid(img[half:], cloth_colors, _CLOTH_GRID)
            img = img @ channel_mix.T * tints[camera] + style_cast
            noise = np.random.default_rng([seed, 37, identity, idx]).normal(
                0.0, noise_std, size=img.shape
            )
            img = np.clip(img + noise, 0.0, 1.0)
            pixels = np.round(img * 255.0).astype(np.uint8)

            rel_path = f"images/id{identity:03d}_img{idx:02d}.png"
            Image.fromarray(pixels).save(root / rel_path, format="PNG")

            if idx < n_train:
                split = "train"
            else:
                split = "query" if (idx - n_train) % 2 == 0 else "gallery"
            records.append(
                SampleRecord(
                    image_path=rel_path,
                    identity=identity,
                    camera=camera,
                    clothing_id=clothing_id,
                    split=split,
                )
            )

    _check_split_guarantees(records, clothing_state)

    meta = {
        "name": name,
        "clothing_state": clothing_state,
        "num_identities": num_identities,
        "image_height": image_height,
        "image_width": image_width,
    }
    (root / META_FILE).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    with (root / MANIFEST_FILE).open("w") as fh:
        for rec in records:
            fh.write(
                json.dumps(
                    {
                        "image_path": rec.image_path,
                        "identity": rec.identity,
                        "camera": rec.camera,
                        "clothing_id": rec.clothing_id,
                        "split": rec.split,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    return load_domain(root)


def _check_split_guarantees(records: Sequence[SampleRecord], clothing_state: str) -> None:
    galleries: dict[int, list[SampleRecord]] = defaultdict(list)
    for rec in records:
        if rec.split == "gallery":
            galleries[rec.identity].append(rec)
    for rec in records:
        if rec.split != "query":
            continue
        mates = galleries.get(rec.identity, [])
        if not any(m.camera != rec.camera for m in mates):
            raise InvalidArgument(
                f"identity {rec.identity}: no cross-camera gallery match for a query; "
                f"increase images_per_identity or num_cameras"
            )
        if clothing_state == "CC" and not any(
            m.camera != rec.camera and m.clothing_id != rec.clothing_id for m in mates
        ):
            raise InvalidArgument(
                f"identity {rec.identity}: no cross-clothing gallery match for a query"
            )


# ---------------------------------------------------------------------------
# P x K batch sampling
# ---------------------------------------------------------------------------

def pk_batch_indices(
    dataset: DomainDataset,
    spec: BatchSpec,
    seed: int,
    epoch: int = 0,
) -> list[list[int]]:
    """Record-index batches with exactly P distinct identities x K instances.

    Identities with fewer than K train images are sampled with replacement.
    Deterministic under (seed, epoch).
    """
    by_id = dataset.train_indices_by_identity()
    ids = sorted(by_id)
    P, K = spec.identities_per_batch, spec.instances_per_identity
    if len(ids) < P:
        raise InvalidArgument(
            f"need at least {P} train identities for batch spec "
            f"({spec.batch_size}, {K}); dataset has {len(ids)}"
        )
    rng = np.random.default_rng([seed, epoch])
    total = sum(len(v) for v in by_id.values())
    num_batches = math.ceil(total / spec.batch_size)

    pools: dict[int, list[int]] = {i: [] for i in ids}

    def draw(identity: int) -> list[int]:
        source = by_id[identity]
        if len(source) < K:
            return list(rng.choice(source, size=K, replace=True))
        pool = pools[identity]
        if len(pool) < K:
            refill = [i for i in rng.permutation(source).tolist() if i not in pool]
            pool.extend(refill)
        taken, pools[identity] = pool[:K], pool[K:]
        return taken

    id_cycle: list[int] = []
    batches = []
    for _ in range(num_batches):
        chosen: list[int] = []
        while len(chosen) < P:
            if not id_cycle:
                id_cycle = rng.permutation(ids).tolist()
            cand = id_cycle.pop()
            if cand not in chosen:
                chosen.append(cand)
        batch: list[int] = []
        for identity in chosen:
            batch.extend(draw(identity))
        batches.append(batch)
    return batches


def sample_pk_batches(
    dataset: DomainDataset,
    spec: BatchSpec,
    seed: int,
    epoch: int = 0,
    audit: Optional[DataAccessAudit] = None,
    augment: bool = False,
) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Stream (images, identity labels) P x K batches for one epoch.

    Images are decoded lazily per batch so the access audit observes reads
    at consumption time.
    """
    aug_rng = np.random.default_rng([seed, epoch, 101]) if augment else None
    for batch in pk_batch_indices(dataset, spec, seed, epoch):
        recs = [dataset.records[i] for i in batch]
        images = dataset.load_images(recs, audit=audit)
        if aug_rng is not None:
            images = augment_images(images, aug_rng)
        labels = np.asarray([r.identity for r in recs], dtype=np.int64)
        yield images, labels


def augment_images(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Flip / pad-crop / erase augmentation over a float image batch."""
    out = images.copy()
    _, h, w, _ = out.shape
    pad = 4
    for i in range(out.shape[0]):
        if rng.random() < 0.5:
            out[i] = out[i, :, ::-1]
        padded = np.pad(out[i], ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        top = rng.integers(0, 2 * pad + 1)
        left = rng.integers(0, 2 * pad + 1)
        out[i] = padded[top : top + h, left : left + w]
        if rng.random() < 0.5:
            eh = int(rng.integers(h // 8, h // 3))
            ew = int(rng.integers(w // 8, w // 3))
            et = int(rng.integers(0, h - eh + 1))
            el = int(rng.integers(0, w - ew + 1))
            out[i, et : et + eh, el : el + ew] = out[i].mean(axis=(0, 1))
    return out


# ---------------------------------------------------------------------------
# Domain merging (joint-training baseline)
# ---------------------------------------------------------------------------

def merge_domains(datasets: Sequence[DomainDataset], name: str = "joint") -> "MergedDataset":
    """Union of train splits with per-domain identity and outfit offsets.

    The merged set only exists for single-run joint training; test records
    are dropped (evaluation always runs per original domain).
    """
    if not datasets:
        raise InvalidArgument("merge_domains needs at least one dataset")
    if len({(d.image_height, d.image_width) for d in datasets}) != 1:
        raise InvalidArgument("cannot merge domains with different image sizes")

    records: list[SampleRecord] = []
    sources: dict[SampleRecord, tuple[DomainDataset, SampleRecord]] = {}
    id_offset = 0
    cloth_offset = 0
    for ds in datasets:
        max_cloth = -1
        for rec in ds.records:
            if rec.split != "train":
                continue
            max_cloth = max(max_cloth, rec.clothing_id)
            merged_rec = replace(
                rec,
                identity=rec.identity + id_offset,
                clothing_id=rec.clothing_id + cloth_offset,
            )
            records.append(merged_rec)
            sources[merged_rec] = (ds, rec)
        id_offset += ds.num_identities
        cloth_offset += max_cloth + 1

    dataset = MergedDataset(
        name=name,
        clothing_state="CC",
        num_identities=id_offset,
        records=tuple(records),
        image_height=datasets[0].image_height,
        image_width=datasets[0].image_width,
        root=datasets[0].root,
    )
    dataset.sources = sources
    return dataset


@dataclass
class MergedDataset(DomainDataset):
    """DomainDataset whose records resolve back to their source domains."""

    sources: dict = field(default_factory=dict, repr=False, compare=False)

    def load_images(
        self,
        records: Sequence[SampleRecord],
        audit: Optional[DataAccessAudit] = None,
    ) -> np.ndarray:
        batches = []
        for rec in records:
            src_ds, src_rec = self.sources[rec]
            batches.append(src_ds.load_images([src_rec], audit=audit))
        return np.concatenate(batches, axis=0)
