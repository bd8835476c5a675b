import hashlib
import json
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from teata.data import (
    BatchSpec,
    DataAccessAudit,
    SampleRecord,
    generate_synthetic_domain,
    load_domain,
    merge_domains,
    pk_batch_indices,
    sample_pk_batches,
)
from teata.errors import (
    DataLeakError,
    InvalidArgument,
    MissingFile,
    ProtocolError,
    SchemaError,
)


def dir_digest(root: Path) -> dict[str, str]:
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            out[str(path.relative_to(root))] = hashlib.sha256(path.read_bytes()).hexdigest()
    return out


class TestGenerator:
    def test_sc_invariant_holds(self, sc_domain):
        outfits = defaultdict(set)
        for rec in sc_domain.records:
            outfits[rec.identity].add(rec.clothing_id)
        assert all(len(v) == 1 for v in outfits.values())
        assert sc_domain.clothing_state == "SC"
        assert sc_domain.num_identities == 8

    def test_cc_has_multiple_outfits_per_identity(self, cc_domain):
        outfits = defaultdict(set)
        for rec in cc_domain.records:
            outfits[rec.identity].add(rec.clothing_id)
        assert all(len(v) >= 2 for v in outfits.values())

    def test_byte_identical_regeneration(self, tmp_path):
        kwargs = dict(
            name="d", seed=3, num_identities=4, images_per_identity=6,
            clothing_state="CC", num_cameras=3, noise_std=0.05,
        )
        generate_synthetic_domain(tmp_path / "a", **kwargs)
        generate_synthetic_domain(tmp_path / "b", **kwargs)
        assert dir_digest(tmp_path / "a") == dir_digest(tmp_path / "b")

    def test_regeneration_in_place_is_idempotent(self, tmp_path):
        kwargs = dict(
            name="d", seed=3, num_identities=4, images_per_identity=6,
            clothing_state="SC", num_cameras=2, noise_std=0.02,
        )
        generate_synthetic_domain(tmp_path / "a", **kwargs)
        first = dir_digest(tmp_path / "a")
        generate_synthetic_domain(tmp_path / "a", **kwargs)
        assert dir_digest(tmp_path / "a") == first

    def test_different_seeds_differ(self, tmp_path):
        kwargs = dict(
            name="d", num_identities=4, images_per_identity=6,
            clothing_state="SC", num_cameras=2, noise_std=0.05,
        )
        generate_synthetic_domain(tmp_path / "a", seed=0, **kwargs)
        generate_synthetic_domain(tmp_path / "b", seed=1, **kwargs)
        assert dir_digest(tmp_path / "a") != dir_digest(tmp_path / "b")

    def test_query_has_cross_camera_match(self, sc_domain):
        gallery = [r for r in sc_domain.records if r.split == "gallery"]
        for q in sc_domain.records:
            if q.split != "query":
                continue
            assert any(g.identity == q.identity and g.camera != q.camera for g in gallery)

    def test_cc_query_has_cross_clothing_match(self, cc_domain):
        gallery = [r for r in cc_domain.records if r.split == "gallery"]
        for q in cc_domain.records:
            if q.split != "query":
                continue
            assert any(
                g.identity == q.identity
                and g.camera != q.camera
                and g.clothing_id != q.clothing_id
                for g in gallery
            )

    def test_counts_too_small_rejected(self, tmp_path):
        with pytest.raises(InvalidArgument):
            generate_synthetic_domain(
                tmp_path / "x", name="x", seed=0, num_identities=4,
                images_per_identity=2, clothing_state="SC",
            )
        with pytest.raises(InvalidArgument):
            generate_synthetic_domain(
                tmp_path / "y", name="y", seed=0, num_identities=1,
                images_per_identity=6, clothing_state="SC",
            )
        with pytest.raises(InvalidArgument):
            generate_synthetic_domain(
                tmp_path / "z", name="z", seed=0, num_identities=4,
                images_per_identity=6, clothing_state="SC", num_cameras=1,
            )


class TestLoadDomain:
    def test_round_trip_preserves_invariants(self, tmp_path):
        ds = generate_synthetic_domain(
            tmp_path / "d", name="two", seed=0, num_identities=2,
            images_per_identity=6, clothing_state="SC", num_cameras=2,
        )
        loaded = load_domain(tmp_path / "d")
        assert loaded.num_identities == 2
        assert loaded.clothing_state == "SC"
        assert loaded.records == ds.records
        assert {r.identity for r in loaded.records} == {0, 1}

    def test_missing_manifest(self, tmp_path):
        (tmp_path / "d").mkdir()
        (tmp_path / "d" / "meta.json").write_text("{}")
        with pytest.raises(MissingFile):
            load_domain(tmp_path / "d")

    def test_negative_identity_rejected(self, tmp_path, sc_domain):
        root = sc_domain.root
        lines = (root / "manifest.jsonl").read_text().splitlines()
        obj = json.loads(lines[0])
        obj["identity"] = -1
        lines[0] = json.dumps(obj, sort_keys=True)
        (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError):
            load_domain(root)

    def test_unknown_split_rejected(self, sc_domain):
        root = sc_domain.root
        lines = (root / "manifest.jsonl").read_text().splitlines()
        obj = json.loads(lines[0])
        obj["split"] = "val"
        lines[0] = json.dumps(obj, sort_keys=True)
        (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(SchemaError):
            load_domain(root)

    def test_sc_with_two_outfits_rejected(self, sc_domain):
        root = sc_domain.root
        lines = (root / "manifest.jsonl").read_text().splitlines()
        obj = json.loads(lines[0])
        obj["clothing_id"] = obj["clothing_id"] + 1000
        lines[0] = json.dumps(obj, sort_keys=True)
        (root / "manifest.jsonl").write_text("\n".join(lines) + "\n")
        with pytest.raises(ProtocolError):
            load_domain(root)

    def test_missing_image_rejected(self, sc_domain):
        (sc_domain.root / sc_domain.records[0].image_path).unlink()
        with pytest.raises(MissingFile):
            load_domain(sc_domain.root)

    def test_noncontiguous_identities_relabelled(self, tmp_path, sc_domain):
        root = sc_domain.root
        lines = (root / "manifest.jsonl").read_text().splitlines()
        out = []
        for line in lines:
            obj = json.loads(line)
            obj["identity"] = obj["identity"] * 7 + 3
            out.append(json.dumps(obj, sort_keys=True))
        (root / "manifest.jsonl").write_text("\n".join(out) + "\n")
        loaded = load_domain(root)
        assert sorted({r.identity for r in loaded.records if r.split == "train"}) == list(range(8))


class TestPKSampler:
    def test_every_batch_has_p_times_k(self, sc_domain):
        spec = BatchSpec(8, 4)
        for batch in pk_batch_indices(sc_domain, spec, seed=0):
            counts = Counter(sc_domain.records[i].identity for i in batch)
            assert len(counts) == 2
            assert all(v == 4 for v in counts.values())

    def test_two_identities_exhaustion(self, tmp_path):
        ds = generate_synthetic_domain(
            tmp_path / "d", name="two", seed=0, num_identities=2,
            images_per_identity=8, clothing_state="SC", num_cameras=2,
        )
        for batch in pk_batch_indices(ds, BatchSpec(8, 4), seed=0):
            assert {ds.records[i].identity for i in batch} == {0, 1}

    def test_deterministic_under_seed_and_epoch(self, sc_domain):
        spec = BatchSpec(8, 4)
        a = pk_batch_indices(sc_domain, spec, seed=5, epoch=2)
        b = pk_batch_indices(sc_domain, spec, seed=5, epoch=2)
        c = pk_batch_indices(sc_domain, spec, seed=5, epoch=3)
        assert a == b
        assert a != c

    def test_single_image_identity_replicated(self, sc_domain):
        # Rewrite the train split so identity 0 keeps one train image.
        records = list(sc_domain.records)
        kept = [r for r in records if not (r.identity == 0 and r.split == "train")]
        first = next(r for r in records if r.identity == 0 and r.split == "train")
        object.__setattr__(sc_domain, "records", tuple(kept + [first]))
        for batch in pk_batch_indices(sc_domain, BatchSpec(8, 4), seed=0):
            by_id = defaultdict(list)
            for i in batch:
                by_id[sc_domain.records[i].identity].append(i)
            if 0 in by_id:
                assert len(set(by_id[0])) == 1
                assert len(by_id[0]) == 4

    def test_too_few_identities(self, sc_domain):
        with pytest.raises(InvalidArgument):
            pk_batch_indices(sc_domain, BatchSpec(64, 4), seed=0)

    def test_epoch_covers_all_images(self, sc_domain):
        # 8 ids x 4 train images, batch 8 -> 4 batches; pools drain without
        # replacement so a full epoch touches every train image.
        seen = set()
        for batch in pk_batch_indices(sc_domain, BatchSpec(8, 4), seed=1):
            seen.update(batch)
        train = {i for i, r in enumerate(sc_domain.records) if r.split == "train"}
        assert seen == train

    def test_stream_yields_images_and_labels(self, sc_domain):
        spec = BatchSpec(8, 4)
        batches = list(sample_pk_batches(sc_domain, spec, seed=0))
        assert len(batches) >= 1
        images, labels = batches[0]
        assert images.shape == (8, 64, 32, 3)
        assert images.dtype == np.float32
        assert labels.shape == (8,)
        assert 0.0 <= images.min() and images.max() <= 1.0

    def test_invalid_batch_spec(self):
        with pytest.raises(InvalidArgument):
            BatchSpec(10, 4)
        with pytest.raises(InvalidArgument):
            BatchSpec(0, 1)

    @given(p=st.integers(1, 4), k=st.integers(1, 5), seed=st.integers(0, 50))
    @settings(max_examples=20, deadline=None)
    def test_property_identity_multiset(self, p, k, seed, tmp_path_factory):
        tmp = tmp_path_factory.mktemp("pk")
        ds = generate_synthetic_domain(
            tmp / f"d{p}_{k}_{seed}", name="d", seed=0, num_identities=4,
            images_per_identity=6, clothing_state="SC", num_cameras=2,
        )
        spec = BatchSpec(p * k, k)
        for batch in pk_batch_indices(ds, spec, seed=seed):
            counts = Counter(ds.records[i].identity for i in batch)
            assert len(counts) == p
            assert all(v == k for v in counts.values())


class TestAudit:
    def test_leak_raises_after_completion(self, sc_domain):
        audit = DataAccessAudit()
        train = sc_domain.records_for("train")[:2]
        sc_domain.load_images(train, audit=audit)
        audit.complete_train(sc_domain.name)
        with pytest.raises(DataLeakError):
            sc_domain.load_images(train, audit=audit)
        assert audit.train_reads_after_completion(sc_domain.name) == 0

    def test_eval_reads_stay_legal(self, sc_domain):
        audit = DataAccessAudit()
        audit.complete_train(sc_domain.name)
        sc_domain.load_images(sc_domain.records_for("query")[:2], audit=audit)
        sc_domain.load_images(sc_domain.records_for("gallery")[:2], audit=audit)


class TestMerge:
    def test_identity_offsetting(self, sc_domain, cc_domain):
        merged = merge_domains([sc_domain, cc_domain])
        assert merged.num_identities == 16
        ids = {r.identity for r in merged.records}
        assert ids == set(range(16))
        assert all(r.split == "train" for r in merged.records)

    def test_clothing_offsets_disjoint(self, sc_domain, cc_domain):
        merged = merge_domains([sc_domain, cc_domain])
        first = {r.clothing_id for r in merged.records if r.identity < 8}
        second = {r.clothing_id for r in merged.records if r.identity >= 8}
        assert first.isdisjoint(second)

    def test_merged_images_load(self, sc_domain, cc_domain):
        merged = merge_domains([sc_domain, cc_domain])
        images = merged.load_images(merged.records[:3])
        assert images.shape == (3, 64, 32, 3)
