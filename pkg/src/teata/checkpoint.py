"""Unified checkpoint directory format shared by encoders, prompts, and
classifiers:

    checkpoint.json   schema version, config hash, domain step index,
                      tensors.bin checksum, and a parameter index mapping
                      name -> {shape, dtype, file, offset}
    tensors.bin       little-endian float32 payloads concatenated in index
                      order

The JSON carries no timestamps so identical runs produce identical bytes.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np
import torch

from .errors import IntegrityError, MissingFile, VersionMismatch

SCHEMA_VERSION = 1
INDEX_FILE = "checkpoint.json"
TENSORS_FILE = "tensors.bin"


def save_checkpoint(
    directory: str | Path,
    tensors: dict[str, torch.Tensor],
    *,
    config_hash: str,
    domain_step: int,
) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)

    index: dict[str, dict] = {}
    payload = bytearray()
    for name in sorted(tensors):
        array = tensors[name].detach().cpu().contiguous().numpy().astype("<f4", copy=False)
        index[name] = {
            "shape": list(array.shape),
            "dtype": "float32",
            "file": TENSORS_FILE,
            "offset": len(payload),
        }
        payload.extend(array.tobytes())

    blob = bytes(payload)
    (directory / TENSORS_FILE).write_bytes(blob)
    meta = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": config_hash,
        "domain_step": domain_step,
        "checksum": hashlib.sha256(blob).hexdigest(),
        "parameters": index,
    }
    (directory / INDEX_FILE).write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    return directory


def load_checkpoint(directory: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    directory = Path(directory)
    index_path = directory / INDEX_FILE
    if not index_path.is_file():
        raise MissingFile(f"no {INDEX_FILE} under {directory}")
    meta = json.loads(index_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise VersionMismatch(
            f"checkpoint schema {meta.get('schema_version')!r} not supported "
            f"(expected {SCHEMA_VERSION})"
        )
    tensors_path = directory / meta["parameters"][next(iter(meta["parameters"]))]["file"] \
        if meta["parameters"] else directory / TENSORS_FILE
    if not tensors_path.is_file():
        raise MissingFile(f"no {TENSORS_FILE} under {directory}")
    blob = tensors_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != meta.get("checksum"):
        raise IntegrityError(f"tensor payload under {directory} fails its checksum")

    tensors: dict[str, torch.Tensor] = {}
    for name, entry in meta["parameters"].items():
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        end = start + count * 4
        if end > len(blob):
            raise IntegrityError(f"parameter {name!r} overruns the tensor payload")
        array = np.frombuffer(blob[start:end], dtype="<f4").reshape(shape)
        tensors[name] = torch.from_numpy(array.copy())
    return meta, tensors


def checkpoint_digest(directory: str | Path) -> str:
    """Digest over both checkpoint files; equal runs give equal digests."""
    directory = Path(directory)
    digest = hashlib.sha256()
    for name in (INDEX_FILE, TENSORS_FILE):
        digest.update((directory / name).read_bytes())
    return digest.hexdigest()
