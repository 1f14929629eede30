"""
Unit tests for the synthetic tri-domain corpus generator
"""

import re
import time

import numpy as np
import pytest

from app.modules.summarization import FEATURE_MARKER, NAME_MARKER, mock_summarize, spoken_text
from app.modules.synthgen import (
    generate_corpus,
    generate_dataset,
    generate_products,
    inject_asr_noise,
    product_title,
    render_domain_instance,
    split_products,
)
from app.schemas import ASR_MISSING_TEXT, DomainId, GroundTruthRecord, SummaryStatus, SynthConfig
from app.services.tensor_io import load_dataset, load_ground_truth

TRUTH = GroundTruthRecord(product_id="p0000", true_name="amber-kettle-000",
                          true_attributes=["waterproof", "foldable", "usb-c"])


def correlation_matrix(arrays: np.ndarray) -> np.ndarray:
    return np.corrcoef(arrays.reshape(len(arrays), -1))


class TestProducts:
    """Test prototypes and ground truth"""

    def test_names_unique(self):
        config = SynthConfig(num_products=1000, frame_shape=(4, 4, 3), distractor_size=2)
        _, truth = generate_products(config)
        names = [t.true_name for t in truth]
        assert len(set(names)) == 1000
        assert all(re.fullmatch(r"[a-z]+-[a-z]+-\d{3,}", n) for n in names)
        assert all(3 <= len(t.true_attributes) <= 6 for t in truth)

    def test_independent_prototypes(self):
        """Test zero inter-product similarity gives uncorrelated prototypes"""
        config = SynthConfig(num_products=6, frame_shape=(32, 32, 3), visual_inter_similarity=0.0)
        prototypes, _ = generate_products(config)
        corr = correlation_matrix(prototypes)
        off_diagonal = corr[~np.eye(6, dtype=bool)]
        assert np.abs(off_diagonal).max() < 0.1

    def test_shared_base_raises_correlation(self):
        config = SynthConfig(num_products=6, frame_shape=(32, 32, 3), visual_inter_similarity=0.5)
        corr = correlation_matrix(generate_products(config)[0])
        assert 0.35 < corr[~np.eye(6, dtype=bool)].mean() < 0.65

    def test_title_carries_markers(self):
        title = product_title(TRUTH, 2)
        assert title == f"{NAME_MARKER}amber-kettle-000 {FEATURE_MARKER}waterproof {FEATURE_MARKER}foldable"


class TestRendering:
    """Test per-domain instance rendering"""

    def test_zero_variance_is_identity(self):
        config = SynthConfig(frame_shape=(8, 8, 3), visual_intra_variance=0.0, distractor_size=2)
        prototype = np.random.default_rng(0).standard_normal((8, 8, 3))
        inst = render_domain_instance(prototype, DomainId.S, config, np.random.default_rng(1), TRUTH, "p0000-S0")
        assert inst.num_frames == config.short_video_frames
        for frame in inst.frames:
            np.testing.assert_allclose(frame, prototype.astype(np.float32))

    def test_frame_counts(self):
        config = SynthConfig(num_products=2, instances_per_domain=1, frame_shape=(8, 8, 3))
        counts = {inst.domain: inst.num_frames for inst in generate_corpus(config, workers=1).instances}
        assert counts == {DomainId.P: 1, DomainId.S: 12, DomainId.L: 24}

    def test_instances_cluster_by_product(self):
        """Test same-product instances correlate more than cross-product ones"""
        config = SynthConfig(num_products=8, instances_per_domain=2, frame_shape=(16, 16, 3),
                             visual_inter_similarity=0.0, visual_intra_variance=0.1, seed=3)
        corpus = generate_corpus(config, workers=2)
        shorts = [i for i in corpus.instances if i.domain is DomainId.S]
        corr = correlation_matrix(np.stack([i.frames.mean(axis=0) for i in shorts]))
        products = [i.product_id for i in shorts]
        same = [corr[a, b] for a in range(len(shorts)) for b in range(a + 1, len(shorts))
                if products[a] == products[b]]
        other = [corr[a, b] for a in range(len(shorts)) for b in range(a + 1, len(shorts))
                 if products[a] != products[b]]
        assert min(same) > max(other)

    def test_nearest_prototype_is_learnable(self):
        """Test the mean frame of S/L instances points at its own prototype"""
        config = SynthConfig(num_products=10, instances_per_domain=2, frame_shape=(16, 16, 3),
                             visual_inter_similarity=0.3, visual_intra_variance=0.2, seed=5)
        corpus = generate_corpus(config, workers=2)
        prototypes = corpus.prototypes.reshape(config.num_products, -1)
        videos = [i for i in corpus.instances if i.domain is not DomainId.P]
        correct = 0
        for inst in videos:
            scores = [np.corrcoef(inst.frames.mean(axis=0).ravel(), p)[0, 1] for p in prototypes]
            correct += int(f"p{int(np.argmax(scores)):04d}" == inst.product_id)
        assert correct / len(videos) > 0.8


class TestAsrNoise:
    """Test transcript synthesis"""

    def test_noise_free_transcript(self):
        config = SynthConfig(asr_noise_ratio=0.0, asr_missing_rate=0.0)
        raw = inject_asr_noise(TRUTH.true_name, TRUTH.true_attributes, config, np.random.default_rng(0))
        assert spoken_text(raw) == "amber-kettle-000 waterproof foldable usb-c"
        summary = mock_summarize(raw)
        assert abs(summary.signal_level - 1.0) < 0.05

    def test_default_noise_level(self):
        """Test 500 transcripts at noise 0.9 summarize to about a tenth of the speech"""
        config = SynthConfig(asr_noise_ratio=0.9, asr_missing_rate=0.0)
        rng = np.random.default_rng(0)
        levels = [mock_summarize(inject_asr_noise(TRUTH.true_name, TRUTH.true_attributes, config, rng)).signal_level
                  for _ in range(500)]
        assert 0.07 <= float(np.mean(levels)) <= 0.13

    def test_signal_order_preserved(self):
        config = SynthConfig(asr_noise_ratio=0.8, asr_missing_rate=0.0)
        raw = inject_asr_noise(TRUTH.true_name, TRUTH.true_attributes, config, np.random.default_rng(2))
        marked = [t for t in raw.split() if t.startswith((NAME_MARKER, FEATURE_MARKER))]
        assert marked == [NAME_MARKER + TRUTH.true_name] + [FEATURE_MARKER + a for a in TRUTH.true_attributes]

    def test_missing_transcripts(self):
        config = SynthConfig(num_products=3, instances_per_domain=2, frame_shape=(8, 8, 3),
                             asr_missing_rate=1.0)
        corpus = generate_corpus(config, workers=1)
        for inst in corpus.instances:
            if inst.domain is DomainId.P:
                assert inst.raw_text.startswith(NAME_MARKER)
            else:
                assert inst.raw_text == ASR_MISSING_TEXT

    def test_filler_only_transcripts(self):
        config = SynthConfig(no_output_rate=1.0, asr_missing_rate=0.0)
        raw = inject_asr_noise(TRUTH.true_name, TRUTH.true_attributes, config, np.random.default_rng(0))
        assert NAME_MARKER not in raw and FEATURE_MARKER not in raw
        assert mock_summarize(raw).status is SummaryStatus.NO_OUTPUT


class TestCorpus:
    """Test corpus assembly, split and files"""

    def test_deterministic_across_workers(self, small_synth_config):
        first = generate_corpus(small_synth_config, workers=1)
        second = generate_corpus(small_synth_config, workers=4)
        assert [i.instance_id for i in first.instances] == [i.instance_id for i in second.instances]
        for a, b in zip(first.instances, second.instances):
            assert a.frames.tobytes() == b.frames.tobytes()
            assert a.raw_text == b.raw_text

    def test_counts_per_domain(self, small_corpus, small_synth_config):
        for domain in DomainId.ordered():
            count = sum(1 for i in small_corpus.instances if i.domain is domain)
            assert count == small_synth_config.num_products * small_synth_config.instances_per_domain

    def test_split_disjoint(self):
        config = SynthConfig(num_products=64, test_fraction=0.1)
        train, test = split_products(config)
        assert not set(train) & set(test)
        assert len(train) + len(test) == 64
        assert len(test) == 6

    def test_split_keeps_both_sides(self):
        config = SynthConfig(num_products=2, test_fraction=0.9)
        train, test = split_products(config)
        assert len(train) == 1 and len(test) == 1

    def test_generate_dataset(self, small_synth_config, tmp_path):
        paths = generate_dataset(small_synth_config, tmp_path, workers=2)
        train = load_dataset(paths["train"])
        test = load_dataset(paths["test"])
        train_ids, test_ids = split_products(small_synth_config)
        assert {i.product_id for i in train} == set(train_ids)
        assert {i.product_id for i in test} == set(test_ids)
        assert len(train) + len(test) == 6 * 3 * 2
        assert len(load_ground_truth(paths["ground_truth"])) == 6
        assert SynthConfig.model_validate_json(paths["config"].read_bytes()) == small_synth_config

    @pytest.mark.performance
    def test_default_config_generates_quickly(self, tmp_path):
        start = time.perf_counter()
        paths = generate_dataset(SynthConfig(), tmp_path)
        assert time.perf_counter() - start < 60.0
        assert len(load_dataset(paths["train"])) + len(load_dataset(paths["test"])) == 64 * 3 * 3


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
