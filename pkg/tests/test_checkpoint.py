import json

import pytest
import torch

from teata.checkpoint import checkpoint_digest, load_checkpoint, save_checkpoint
from teata.errors import IntegrityError, MissingFile, VersionMismatch


@pytest.fixture
def tensors():
    g = torch.Generator().manual_seed(0)
    return {
        "encoder.weight": torch.randn(4, 3, generator=g),
        "encoder.bias": torch.randn(4, generator=g),
        "prompts.shared": torch.randn(2, 8, generator=g),
        "scalar": torch.tensor(1.5),
    }


class TestRoundTrip:
    def test_save_load_identity(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "ckpt", tensors, config_hash="abc", domain_step=3)
        meta, loaded = load_checkpoint(tmp_path / "ckpt")
        assert meta["config_hash"] == "abc"
        assert meta["domain_step"] == 3
        assert set(loaded) == set(tensors)
        for name in tensors:
            assert torch.equal(loaded[name], tensors[name])

    def test_payload_is_little_endian_float32(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "ckpt", tensors, config_hash="abc", domain_step=1)
        meta = json.loads((tmp_path / "ckpt" / "checkpoint.json").read_text())
        total = sum(
            4 * max(1, int(torch.tensor(entry["shape"]).prod().item()) if entry["shape"] else 1)
            for entry in meta["parameters"].values()
        )
        assert (tmp_path / "ckpt" / "tensors.bin").stat().st_size == total
        assert all(e["dtype"] == "float32" for e in meta["parameters"].values())

    def test_digest_stable(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "a", tensors, config_hash="abc", domain_step=1)
        save_checkpoint(tmp_path / "b", tensors, config_hash="abc", domain_step=1)
        assert checkpoint_digest(tmp_path / "a") == checkpoint_digest(tmp_path / "b")


class TestFailureModes:
    def test_corrupted_payload(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "ckpt", tensors, config_hash="abc", domain_step=1)
        blob = bytearray((tmp_path / "ckpt" / "tensors.bin").read_bytes())
        blob[3] ^= 0xFF
        (tmp_path / "ckpt" / "tensors.bin").write_bytes(bytes(blob))
        with pytest.raises(IntegrityError):
            load_checkpoint(tmp_path / "ckpt")

    def test_schema_version_mismatch(self, tmp_path, tensors):
        save_checkpoint(tmp_path / "ckpt", tensors, config_hash="abc", domain_step=1)
        meta_path = tmp_path / "ckpt" / "checkpoint.json"
        meta = json.loads(meta_path.read_text())
        meta["schema_version"] = 999
        meta_path.write_text(json.dumps(meta))
        with pytest.raises(VersionMismatch):
            load_checkpoint(tmp_path / "ckpt")

    def test_missing_files(self, tmp_path, tensors):
        with pytest.raises(MissingFile):
            load_checkpoint(tmp_path / "nope")
        save_checkpoint(tmp_path / "ckpt", tensors, config_hash="abc", domain_step=1)
        (tmp_path / "ckpt" / "tensors.bin").unlink()
        with pytest.raises(MissingFile):
            load_checkpoint(tmp_path / "ckpt")

    def test_integrity_error_is_version_mismatch(self):
        assert issubclass(IntegrityError, VersionMismatch)
