"""
Shared fixtures for the TriDomain Retrieval test suite
"""

from typing import Dict, List

import numpy as np
import pytest

from app.modules.summarization import summarize_dataset
from app.modules.synthgen import SyntheticCorpus, generate_corpus
from app.schemas import (
    DomainId,
    EmbeddingRecord,
    ModelConfig,
    ProductInstance,
    SummarizerKind,
    SummaryRecord,
    SynthConfig,
)


def make_embedding(product_id: str, instance_id: str, domain: DomainId, vector) -> EmbeddingRecord:
    return EmbeddingRecord.from_unnormalized(product_id, instance_id, domain, np.asarray(vector, dtype=np.float64))


def make_instance(product_id: str, instance_id: str, domain: DomainId, num_frames: int = 1,
                  shape=(8, 8, 3), raw_text: str = "", seed: int = 0) -> ProductInstance:
    rng = np.random.default_rng(seed)
    return ProductInstance(product_id=product_id, instance_id=instance_id, domain=domain,
                           frames=rng.standard_normal((num_frames, *shape)).astype(np.float32),
                           raw_text=raw_text)


@pytest.fixture
def tiny_model_config() -> ModelConfig:
    """Small desk dims that keep forward passes in the millisecond range"""
    return ModelConfig(
        n_frames=3, m_tokens=8, d_visual=32, d_text=48, d_embed=16,
        fusion_blocks=1, temporal_blocks=1, text_layers=1, frame_layers=1,
        num_heads=4, mlp_ratio=2, patch_size=4, frame_shape=(8, 8, 3),
    )


@pytest.fixture
def small_synth_config() -> SynthConfig:
    return SynthConfig(
        num_products=6, instances_per_domain=2, frame_shape=(8, 8, 3),
        visual_intra_variance=0.2, visual_inter_similarity=0.3,
        asr_noise_ratio=0.8, asr_missing_rate=0.0, seed=7, test_fraction=0.34,
        short_video_frames=6, live_stream_frames=8, distractor_size=2,
    )


@pytest.fixture
def small_corpus(small_synth_config) -> SyntheticCorpus:
    return generate_corpus(small_synth_config, workers=2)


@pytest.fixture
def mock_summaries(small_corpus) -> Dict[str, SummaryRecord]:
    records = summarize_dataset(small_corpus.instances, SummarizerKind.LLM_MOCK)
    return {r.instance_id: r for r in records}


@pytest.fixture
def perfect_embeddings() -> List[EmbeddingRecord]:
    """Each product has one basis direction shared by its P, S and L instances"""
    records = []
    for p in range(5):
        vector = np.zeros(8)
        vector[p] = 1.0
        for domain in DomainId.ordered():
            records.append(make_embedding(f"p{p}", f"p{p}-{domain.value}", domain, vector))
    return records
