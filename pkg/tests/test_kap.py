import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from teata.encoders import ImageEncoder
from teata.errors import EmptyIdentity, InvalidArgument, InvalidEpoch, MissingSource
from teata.kap import (
    AdaptedClassifier,
    SlowPacedSchedule,
    image_prototypes,
    init_classifier,
    stage1_learning_rate,
    stage2_learning_rate,
    stage2_prompt_tuning_hook,
)
from teata.prompts import StructuredPromptStore


class TestInitClassifier:
    def test_ka_t_rows_unit_norm(self):
        table = torch.full((4, 8), 3.0) * torch.rand(4, 8).add(0.5)
        clf = init_classifier("KA_T", text_table=table)
        norms = clf.weight.norm(dim=1)
        assert torch.allclose(norms, torch.ones(4), atol=1e-6)
        assert clf.init_mode == "KA_T"

    def test_ka_t_equals_normalized_table_bitwise(self):
        table = torch.rand(5, 8) * 3.0
        clf = init_classifier("KA_T", text_table=table)
        assert torch.equal(clf.weight.detach(), F.normalize(table, dim=1))

    def test_ka_v_equals_normalized_prototypes(self):
        protos = torch.rand(3, 6) + 0.1
        clf = init_classifier("KA_V", image_prototypes=protos)
        assert torch.allclose(clf.weight.detach(), F.normalize(protos, dim=1), atol=1e-7)

    def test_random_is_seed_deterministic(self):
        a = init_classifier("RANDOM", num_identities=4, embed_dim=8, seed=3)
        b = init_classifier("RANDOM", num_identities=4, embed_dim=8, seed=3)
        c = init_classifier("RANDOM", num_identities=4, embed_dim=8, seed=4)
        assert torch.equal(a.weight, b.weight)
        assert not torch.equal(a.weight, c.weight)
        assert torch.allclose(a.weight.norm(dim=1), torch.ones(4), atol=1e-6)

    def test_missing_source(self):
        with pytest.raises(MissingSource):
            init_classifier("KA_T")
        with pytest.raises(MissingSource):
            init_classifier("KA_V")
        with pytest.raises(MissingSource):
            init_classifier("RANDOM", num_identities=4)
        with pytest.raises(InvalidArgument):
            init_classifier("KA_X", text_table=torch.rand(2, 2))

    def test_classifier_is_trainable(self):
        clf = init_classifier("RANDOM", num_identities=2, embed_dim=4, seed=0)
        assert isinstance(clf, AdaptedClassifier)
        assert clf.weight.requires_grad


class TestImagePrototypes:
    def test_mean_of_known_features(self, sc_domain):
        encoder = ImageEncoder(seed=0)
        protos = image_prototypes(encoder, sc_domain)
        by_id = sc_domain.train_indices_by_identity()
        # Independent accumulation oracle: one image at a time, scalar sums.
        with torch.no_grad():
            for identity, indices in by_id.items():
                rows = []
                for i in indices:
                    img = sc_domain.load_images([sc_domain.records[i]])
                    _, feat = encoder(torch.from_numpy(img))
                    rows.append(feat[0].numpy().astype(np.float64))
                mean = np.stack(rows).mean(axis=0)
                assert np.abs(protos[identity].numpy() - mean).max() < 1e-6

    def test_single_image_identity(self, sc_domain):
        encoder = ImageEncoder(seed=1)
        records = [r for r in sc_domain.records if not (r.identity == 0 and r.split == "train")]
        keep = next(r for r in sc_domain.records if r.identity == 0 and r.split == "train")
        object.__setattr__(sc_domain, "records", tuple(records + [keep]))
        protos = image_prototypes(encoder, sc_domain)
        with torch.no_grad():
            img = sc_domain.load_images([keep])
            _, feat = encoder(torch.from_numpy(img))
        assert torch.allclose(protos[0], feat[0], atol=1e-6)

    def test_empty_identity_rejected(self, sc_domain):
        records = tuple(
            r for r in sc_domain.records if not (r.identity == 0 and r.split == "train")
        )
        object.__setattr__(sc_domain, "records", records)
        with pytest.raises(EmptyIdentity):
            image_prototypes(ImageEncoder(seed=0), sc_domain)


class TestSchedule:
    def test_paper_plan_anchor_points(self):
        sched = SlowPacedSchedule()
        assert stage2_learning_rate(sched, 1, 0) == pytest.approx(5e-7)
        assert stage2_learning_rate(sched, 1, 9) == pytest.approx(5e-6)
        assert stage2_learning_rate(sched, 1, 20) == pytest.approx(5e-6)
        assert stage2_learning_rate(sched, 1, 40) == pytest.approx(5e-7)
        assert stage2_learning_rate(sched, 2, 20) == pytest.approx(5e-7)

    def test_invalid_epoch(self):
        sched = SlowPacedSchedule()
        with pytest.raises(InvalidEpoch):
            stage2_learning_rate(sched, 1, -1)
        with pytest.raises(InvalidEpoch):
            stage2_learning_rate(sched, 1, 60)

    @given(epoch=st.integers(0, 59), domain=st.integers(2, 6))
    @settings(max_examples=80, deadline=None)
    def test_slow_pace_invariant(self, epoch, domain):
        sched = SlowPacedSchedule()
        fast = stage2_learning_rate(sched, 1, epoch)
        slow = stage2_learning_rate(sched, domain, epoch)
        assert slow == fast / 10.0

    def test_stage1_cosine(self):
        sched = SlowPacedSchedule()
        assert stage1_learning_rate(sched, 0, 120) == pytest.approx(3.5e-4)
        assert stage1_learning_rate(sched, 60, 120) == pytest.approx(3.5e-4 / 2)
        values = [stage1_learning_rate(sched, e, 120) for e in range(120)]
        assert all(a >= b for a, b in zip(values, values[1:]))
        with pytest.raises(InvalidEpoch):
            stage1_learning_rate(sched, 120, 120)


class TestPromptTuningHook:
    def test_disabled_keeps_prompts_fixed(self):
        store = StructuredPromptStore(num_pairs=4, token_width=8)
        store.init_domain_prompts(1, num_identities=3, seed=0)
        params = stage2_prompt_tuning_hook(store, 1, enabled=False)
        assert params == []
        assert not store.shared.requires_grad
        assert not store.specific["1"].requires_grad

    def test_enabled_returns_parameters(self):
        store = StructuredPromptStore(num_pairs=4, token_width=8)
        store.init_domain_prompts(1, num_identities=3, seed=0)
        params = stage2_prompt_tuning_hook(store, 1, enabled=True)
        assert len(params) == 2
        assert all(p.requires_grad for p in params)

    def test_token_subset_selection(self):
        store = StructuredPromptStore(num_pairs=4, token_width=8)
        store.init_domain_prompts(1, num_identities=3, seed=0)
        only_shared = stage2_prompt_tuning_hook(store, 1, enabled=True, which="shared")
        assert len(only_shared) == 1
        assert only_shared[0] is store.shared
