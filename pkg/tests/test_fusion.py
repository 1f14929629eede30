"""
Unit tests for projections, fusion variants and the embedding model
"""

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from app.modules.encoders import TextFeatureBundle, VisualFeatureBundle, Vocabulary
from app.modules.fusion import (
    MultimodalFusion,
    ProductEmbeddingModel,
    count_parameters,
    embed_dataset,
    embed_instance,
    fuse,
    prepare_inputs,
    project_features,
)
from app.schemas import (
    DomainId,
    FusionVariant,
    Modality,
    SharingMode,
    SharingScope,
    SummaryRecord,
    SummaryStatus,
)
from tests.conftest import make_instance

TEXTS = ["amber kettle waterproof foldable", "Product name: Unknown; Features: Unknown"]


@pytest.fixture
def model_config(tiny_model_config):
    return tiny_model_config.model_copy(update={"vocab": Vocabulary.build(TEXTS).pieces})


def make_summary(instance_id: str, name: str = "amber-kettle-001", features=("waterproof",)) -> SummaryRecord:
    return SummaryRecord(instance_id=instance_id, product_name=name, features=list(features),
                         status=SummaryStatus.OK, signal_level=0.2)


def random_sequences(batch: int = 2, n: int = 3, m: int = 8, dim: int = 32, seed: int = 0):
    gen = torch.Generator().manual_seed(seed)
    visual = torch.randn(batch, n + 1, dim, generator=gen)
    text = torch.randn(batch, m + 1, dim, generator=gen)
    valid = torch.ones(batch, m + 1, dtype=torch.bool)
    valid[:, 5:] = False
    return visual, text, valid


class TestProjection:
    """Test the common-width projection"""

    def test_identity_visual_projection(self):
        torch.manual_seed(0)
        vb = VisualFeatureBundle(v=torch.randn(2, 32), z=torch.randn(2, 3, 32))
        tb = TextFeatureBundle(y0=torch.randn(2, 48), y=torch.randn(2, 8, 48), valid=torch.ones(2, 8, dtype=torch.bool))
        visual_proj = nn.Linear(32, 32)
        with torch.no_grad():
            visual_proj.weight.copy_(torch.eye(32))
            visual_proj.bias.zero_()
        visual_seq, text_seq, text_valid = project_features(vb, tb, visual_proj, nn.Linear(48, 32))
        assert visual_seq.shape == (2, 4, 32)
        assert text_seq.shape == (2, 9, 32)
        assert torch.allclose(visual_seq[:, 1:], vb.z)
        assert torch.allclose(visual_seq[:, 0], vb.v)
        assert text_valid[:, 0].all()


class TestFusionVariants:
    """Test every variant's output contract"""

    @pytest.mark.parametrize("variant", list(FusionVariant))
    def test_output_contract(self, variant):
        torch.manual_seed(0)
        fusion = MultimodalFusion(variant, 32, 4, 2, 2)
        head = nn.Linear(fusion.output_width, 16)
        e = fuse(variant, *random_sequences(), fusion, head)
        assert e.shape == (2, 16)
        assert torch.allclose(e.norm(dim=-1), torch.ones(2), atol=1e-6)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            MultimodalFusion("late", 32, 4, 2, 2)

    def test_mismatched_variant(self):
        fusion = MultimodalFusion(FusionVariant.SUM, 32, 4, 2, 1)
        with pytest.raises(ValueError, match="built for sum"):
            fuse(FusionVariant.CAT, *random_sequences(), fusion, nn.Linear(32, 16))

    def test_sum_is_symmetric(self):
        """Test swapping the two CLS inputs leaves the sum variant unchanged"""
        fusion = MultimodalFusion(FusionVariant.SUM, 32, 4, 2, 1)
        head = nn.Linear(32, 16)
        visual, text, valid = random_sequences()
        swapped_visual, swapped_text = visual.clone(), text.clone()
        swapped_visual[:, 0], swapped_text[:, 0] = text[:, 0], visual[:, 0]
        a = fuse(FusionVariant.SUM, visual, text, valid, fusion, head)
        b = fuse(FusionVariant.SUM, swapped_visual, swapped_text, valid, fusion, head)
        assert torch.allclose(a, b, atol=1e-7)

    def test_identity_blocks_reduce_to_sum(self):
        """Test 'ours' with zeroed residual branches equals the sum variant"""
        torch.manual_seed(0)
        ours = MultimodalFusion(FusionVariant.OURS, 32, 4, 2, 4).double()
        ours.zero_residual_()
        plain = MultimodalFusion(FusionVariant.SUM, 32, 4, 2, 4)
        head = nn.Linear(32, 16).double()
        visual, text, valid = (t.double() if t.is_floating_point() else t for t in random_sequences())
        a = fuse(FusionVariant.OURS, visual, text, valid, ours, head)
        b = fuse(FusionVariant.SUM, visual, text, valid, plain, head)
        assert torch.allclose(a, b, atol=1e-6)

    def test_coattention_doubles_cross_attention(self):
        xa = count_parameters(MultimodalFusion(FusionVariant.XA_T_AS_Q, 32, 4, 2, 4))
        coa = count_parameters(MultimodalFusion(FusionVariant.COA, 32, 4, 2, 4))
        assert coa == 2 * xa

    def test_transformer_free_variants_have_no_blocks(self):
        assert count_parameters(MultimodalFusion(FusionVariant.SUM, 32, 4, 2, 4)) == 0
        assert MultimodalFusion(FusionVariant.CAT, 32, 4, 2, 4).output_width == 64

    def test_padding_does_not_leak(self):
        """Test the masked text positions do not affect the 'ours' output"""
        torch.manual_seed(0)
        fusion = MultimodalFusion(FusionVariant.OURS, 32, 4, 2, 2)
        head = nn.Linear(32, 16)
        visual, text, valid = random_sequences()
        noisy = text.clone()
        noisy[:, 5:] = 100.0
        a = fuse(FusionVariant.OURS, visual, text, valid, fusion, head)
        b = fuse(FusionVariant.OURS, visual, noisy, valid, fusion, head)
        assert torch.allclose(a, b, atol=1e-6)


class TestProductEmbeddingModel:
    """Test the full embedding pipeline"""

    @pytest.mark.parametrize("variant", list(FusionVariant))
    def test_every_variant_end_to_end(self, model_config, variant):
        torch.manual_seed(0)
        config = model_config.model_copy(update={"fusion_variant": variant})
        model = ProductEmbeddingModel(config)
        inst = make_instance("p1", "p1-S0", DomainId.S, num_frames=5)
        e = embed_instance(inst, make_summary(inst.instance_id), config, model)
        assert e.e.shape == (16,)

    def test_deterministic(self, model_config):
        torch.manual_seed(0)
        model = ProductEmbeddingModel(model_config)
        inst = make_instance("p1", "p1-L0", DomainId.L, num_frames=7)
        summary = make_summary(inst.instance_id)
        first = embed_instance(inst, summary, model_config, model).e
        second = embed_instance(inst, summary, model_config, model).e
        assert first.tobytes() == second.tobytes()

    def test_norm_audit(self, model_config):
        """Test 100 seeded random instances all embed at unit norm"""
        torch.manual_seed(0)
        model = ProductEmbeddingModel(model_config)
        for seed in range(100):
            inst = make_instance(f"p{seed}", f"i{seed}", DomainId.S, num_frames=1 + seed % 5, seed=seed)
            e = embed_instance(inst, make_summary(inst.instance_id), model_config, model).e
            assert abs(float(np.linalg.norm(e)) - 1.0) < 1e-6

    def test_non_ok_summary_uses_fallback(self, model_config):
        torch.manual_seed(0)
        model = ProductEmbeddingModel(model_config)
        inst = make_instance("p1", "p1-L0", DomainId.L, num_frames=4)
        missing = SummaryRecord(instance_id=inst.instance_id, status=SummaryStatus.ASR_MISSING)
        no_output = SummaryRecord(instance_id=inst.instance_id, status=SummaryStatus.NO_OUTPUT)
        a = embed_instance(inst, missing, model_config, model).e
        b = embed_instance(inst, no_output, model_config, model).e
        assert not np.allclose(a, b)

    def test_visual_only_path(self, model_config):
        """Test visual modality computes normalize(Linear(v))"""
        torch.manual_seed(0)
        config = model_config.model_copy(update={"modality": Modality.VISUAL})
        model = ProductEmbeddingModel(config).eval()
        inst = make_instance("p1", "p1-S0", DomainId.S, num_frames=6)
        frames, ids, valid = prepare_inputs([inst], None, config)
        assert ids is None and valid is None
        with torch.no_grad():
            v = model.trunk(DomainId.S).encode_visual(frames).v
            expected = F.normalize(model.head(DomainId.S)(v), dim=-1)
        actual = embed_instance(inst, None, config, model).e
        np.testing.assert_allclose(actual, expected[0].double().numpy(), atol=1e-6)

    def test_dropped_text_leaves_visual_feature(self, model_config):
        """Test a fully dropped text sequence reduces the sum variant to the projected visual token"""
        torch.manual_seed(0)
        config = model_config.model_copy(update={"fusion_variant": FusionVariant.SUM, "text_dropout": 1.0})
        model = ProductEmbeddingModel(config).train()
        trunk = model.trunk(DomainId.S)
        inst = make_instance("p1", "p1-S0", DomainId.S, num_frames=6)
        frames, ids, valid = prepare_inputs([inst], {inst.instance_id: make_summary(inst.instance_id)}, config)
        with torch.no_grad():
            expected = trunk.visual_proj(trunk.encode_visual(frames).v)
            actual = trunk(frames, ids, valid)
        torch.testing.assert_close(actual, expected)

    def test_text_dropout_inactive_in_eval(self, model_config):
        torch.manual_seed(0)
        config = model_config.model_copy(update={"text_dropout": 1.0})
        model = ProductEmbeddingModel(config)
        inst = make_instance("p1", "p1-S0", DomainId.S, num_frames=6)
        with_text = embed_instance(inst, make_summary(inst.instance_id), config, model).e
        other_text = embed_instance(inst, make_summary(inst.instance_id, features=("foldable",)), config, model).e
        assert not np.allclose(with_text, other_text)

    def test_text_modality_requires_summaries(self, model_config):
        config = model_config.model_copy(update={"modality": Modality.TEXT})
        with pytest.raises(ValueError, match="requires summaries"):
            prepare_inputs([make_instance("p", "i", DomainId.P)], None, config)

    def test_missing_summary(self, model_config):
        with pytest.raises(ValueError, match="no summary for instance i"):
            prepare_inputs([make_instance("p", "i", DomainId.P)], {}, model_config)


class TestSharing:
    """Test parameter sharing across domains"""

    def test_shared_branches_agree(self, model_config):
        """Test the same payload tagged P, S or L embeds identically when shared"""
        torch.manual_seed(0)
        model = ProductEmbeddingModel(model_config).eval()
        inst = make_instance("p1", "x", DomainId.S, num_frames=3)
        frames, ids, valid = prepare_inputs([inst], {"x": make_summary("x")}, model_config)
        with torch.no_grad():
            outputs = [model(frames, ids, valid, d) for d in DomainId.ordered()]
        assert len(model.trunks) == 1 and len(model.heads) == 1
        assert torch.equal(outputs[0], outputs[1])
        assert torch.equal(outputs[1], outputs[2])

    def test_branch_specific_heads(self, model_config):
        torch.manual_seed(0)
        config = model_config.model_copy(update={"sharing": SharingMode.BRANCH_SPECIFIC})
        model = ProductEmbeddingModel(config, num_classes=3).eval()
        assert len(model.trunks) == 1
        assert set(model.heads.keys()) == {"P", "S", "L"}
        assert set(model.classifiers.keys()) == {"P", "S", "L"}
        inst = make_instance("p1", "x", DomainId.S, num_frames=3)
        frames, ids, valid = prepare_inputs([inst], {"x": make_summary("x")}, config)
        with torch.no_grad():
            assert not torch.allclose(model(frames, ids, valid, "P"), model(frames, ids, valid, "L"))

    def test_branch_specific_all_layers(self, model_config):
        config = model_config.model_copy(update={"sharing": SharingMode.BRANCH_SPECIFIC,
                                                 "sharing_scope": SharingScope.ALL})
        shared = ProductEmbeddingModel(model_config)
        split = ProductEmbeddingModel(config)
        assert len(split.trunks) == 3
        assert count_parameters(split.trunks) == 3 * count_parameters(shared.trunks)

    def test_classifier_required(self, model_config):
        model = ProductEmbeddingModel(model_config)
        with pytest.raises(RuntimeError):
            model.classify(torch.zeros(1, 16), DomainId.P)

    def test_temperature_initial_value(self, model_config):
        model = ProductEmbeddingModel(model_config)
        assert abs(float(model.temperature) - 0.07) < 1e-6


class TestEmbedDataset:
    """Test batched embedding of a corpus"""

    def test_order_and_norm(self, model_config):
        torch.manual_seed(0)
        model = ProductEmbeddingModel(model_config)
        instances = [
            make_instance("p1", "p1-L0", DomainId.L, num_frames=4, seed=1),
            make_instance("p1", "p1-P0", DomainId.P, seed=2),
            make_instance("p2", "p2-S0", DomainId.S, num_frames=2, seed=3),
            make_instance("p2", "p2-P0", DomainId.P, seed=4),
        ]
        summaries = {inst.instance_id: make_summary(inst.instance_id) for inst in instances}
        records = embed_dataset(instances, summaries, model, batch_size=1)
        assert [r.instance_id for r in records] == [i.instance_id for i in instances]
        assert records[0].domain is DomainId.L
        for record in records:
            assert abs(float(np.linalg.norm(record.vector.astype(np.float64))) - 1.0) < 1e-6

    def test_batching_does_not_change_vectors(self, model_config):
        torch.manual_seed(0)
        model = ProductEmbeddingModel(model_config)
        instances = [make_instance(f"p{i}", f"i{i}", DomainId.S, num_frames=3, seed=i) for i in range(5)]
        summaries = {inst.instance_id: make_summary(inst.instance_id) for inst in instances}
        single = embed_dataset(instances, summaries, model, batch_size=1)
        batched = embed_dataset(instances, summaries, model, batch_size=4)
        for a, b in zip(single, batched):
            np.testing.assert_allclose(a.vector, b.vector, atol=1e-5)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
