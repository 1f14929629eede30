"""
Unit tests for settings, error types and data schemas
"""

import numpy as np
import pytest
from pydantic import ValidationError

from app.config import Settings
from app.exceptions import DataValidationError, LLMTransportError, TrainingDivergenceError, UsageError
from app.schemas import (
    DomainId,
    EmbeddingRecord,
    EvalReport,
    LossBreakdown,
    ModelConfig,
    ProductInstance,
    SummaryRecord,
    SummaryStatus,
    SummaryView,
    SynthConfig,
    TaskId,
    TaskMetrics,
    TrainingConfig,
)


class TestSettings:
    """Test runtime settings validation"""

    def test_defaults(self):
        """Test default settings without an endpoint"""
        s = Settings(_env_file=None)
        assert s.llm_max_retries == 3
        assert s.llm_max_concurrency == 4
        assert not s.llm_configured

    def test_production_requires_endpoint(self):
        """Test that production refuses a missing LLM endpoint"""
        with pytest.raises(ValidationError):
            Settings(_env_file=None, environment="production")

    def test_endpoint_scheme(self):
        """Test that the endpoint must be http(s)"""
        with pytest.raises(ValidationError):
            Settings(_env_file=None, llm_endpoint_url="ftp://example.org")
        s = Settings(_env_file=None, llm_endpoint_url="http://localhost:8080/v1/complete")
        assert s.llm_configured

    def test_backoff_order(self):
        """Test that backoff max below min is rejected"""
        with pytest.raises(ValidationError):
            Settings(_env_file=None, llm_backoff_min=5.0, llm_backoff_max=1.0)

    def test_environment_override(self, monkeypatch):
        """Test environment variables are read case-insensitively"""
        monkeypatch.setenv("SIMILARITY_BLOCK_SIZE", "17")
        assert Settings(_env_file=None).similarity_block_size == 17


class TestExceptions:
    """Test error hierarchy and exit codes"""

    def test_exit_codes(self):
        assert UsageError("x").exit_code == 1
        assert DataValidationError("x").exit_code == 2

    def test_data_error_is_value_error(self):
        with pytest.raises(ValueError):
            raise DataValidationError("bad", path="a.jsonl", line=3)

    def test_messages(self):
        assert "after 3 attempts" in str(LLMTransportError("timeout", attempts=3))
        err = TrainingDivergenceError(batch_id=7, epoch=1)
        assert err.batch_id == 7
        assert "batch 7" in str(err)


class TestDomainAndTask:
    """Test enumerations"""

    def test_domain_order(self):
        assert DomainId.ordered() == [DomainId.P, DomainId.S, DomainId.L]
        assert not DomainId.P.has_asr
        assert DomainId.L.has_asr

    def test_task_domains_differ(self):
        for task in TaskId:
            assert task.query_domain != task.gallery_domain
        assert TaskId.L2P.query_domain is DomainId.L
        assert TaskId.L2P.gallery_domain is DomainId.P


class TestProductInstance:
    """Test instance validation"""

    def test_valid_instance(self):
        inst = ProductInstance(product_id="p1", instance_id="p1-S0", domain="S",
                               frames=np.zeros((12, 8, 8, 3)))
        assert inst.num_frames == 12
        assert inst.frames.dtype == np.float32
        assert not inst.frames.flags.writeable

    def test_empty_product_id(self):
        with pytest.raises(ValidationError, match="product_id empty"):
            ProductInstance(product_id=" ", instance_id="i", domain="P", frames=np.zeros((1, 4, 4, 3)))

    def test_p_must_be_single_frame(self):
        with pytest.raises(ValidationError, match="single image"):
            ProductInstance(product_id="p", instance_id="i", domain="P", frames=np.zeros((2, 4, 4, 3)))

    def test_rank_and_finiteness(self):
        with pytest.raises(ValidationError, match="rank 4"):
            ProductInstance(product_id="p", instance_id="i", domain="S", frames=np.zeros((4, 4, 3)))
        frames = np.zeros((1, 4, 4, 3))
        frames[0, 0, 0, 0] = np.nan
        with pytest.raises(ValidationError, match="non-finite"):
            ProductInstance(product_id="p", instance_id="i", domain="S", frames=frames)


class TestSummaryRecord:
    """Test summary status invariants"""

    def test_ok_requires_name(self):
        with pytest.raises(ValidationError):
            SummaryRecord(status=SummaryStatus.OK, product_name="Unknown", signal_level=0.1)
        with pytest.raises(ValidationError):
            SummaryRecord(status=SummaryStatus.OK, product_name="", signal_level=0.1)

    def test_raw_view_without_name(self):
        record = SummaryRecord(status=SummaryStatus.OK, features=["hello"], signal_level=1.0,
                               view=SummaryView.RAW)
        assert record.product_name == ""

    def test_non_ok_signal_is_zero(self):
        with pytest.raises(ValidationError):
            SummaryRecord(status=SummaryStatus.NO_OUTPUT, signal_level=0.2)

    def test_missing_has_empty_fields(self):
        with pytest.raises(ValidationError):
            SummaryRecord(status=SummaryStatus.ASR_MISSING, product_name="x")

    def test_negative_signal(self):
        with pytest.raises(ValidationError):
            SummaryRecord(status=SummaryStatus.OK, product_name="x", signal_level=-0.1)


class TestEmbeddingRecord:
    """Test unit-norm embeddings"""

    def test_rejects_unnormalized(self):
        with pytest.raises(ValidationError, match="norm"):
            EmbeddingRecord(product_id="p", instance_id="i", domain="P", vector=np.array([1.0, 1.0]))

    def test_from_unnormalized(self):
        record = EmbeddingRecord.from_unnormalized("p", "i", DomainId.S, np.array([3.0, 4.0]))
        assert record.vector.dtype == np.float32
        assert abs(np.linalg.norm(record.vector.astype(np.float64)) - 1.0) < 1e-6
        np.testing.assert_allclose(record.vector, [0.6, 0.8], atol=1e-7)


class TestConfigs:
    """Test experiment config constraints"""

    def test_heads_divide_dims(self):
        with pytest.raises(ValidationError):
            ModelConfig(d_visual=30, num_heads=4)

    def test_full_scale_dims(self):
        config = ModelConfig.full_scale()
        assert (config.d_visual, config.d_text, config.d_embed) == (512, 768, 128)
        assert config.fusion_blocks == 4
        assert config.n_frames == 8 and config.m_tokens == 32

    def test_synth_rates_in_range(self):
        with pytest.raises(ValidationError):
            SynthConfig(asr_noise_ratio=1.5)
        with pytest.raises(ValidationError):
            SynthConfig(num_products=1)
        with pytest.raises(ValidationError):
            SynthConfig(visual_inter_similarity=1.0)

    def test_training_domain_exclusion(self):
        config = TrainingConfig(excluded_domains=["S"])
        assert config.present_domains == [DomainId.P, DomainId.L]
        with pytest.raises(ValidationError):
            TrainingConfig(excluded_domains=["S", "L"])

    def test_batch_size_floor(self):
        with pytest.raises(ValidationError):
            TrainingConfig(batch_size=1)

    def test_full_scale_peaks(self):
        config = TrainingConfig().with_full_scale_peaks()
        assert config.peak_learning_rates == [5e-5, 1e-5, 5e-5, 5e-3]


class TestReports:
    """Test evaluation output invariants"""

    def test_loss_total_must_match(self):
        LossBreakdown(contrastive={"PS": 1.0}, classification={"P": 2.0}, total=3.0, temperature=0.07)
        with pytest.raises(ValidationError):
            LossBreakdown(contrastive={"PS": 1.0}, classification={"P": 2.0}, total=4.0, temperature=0.07)

    def test_recall_monotone(self):
        with pytest.raises(ValidationError):
            TaskMetrics(r1=50.0, r5=40.0, r10=60.0, mrr=0.5, ndcg10=0.5, n_queries=4)

    def test_mean_r1(self):
        metrics = TaskMetrics(r1=50.0, r5=60.0, r10=70.0, mrr=0.5, ndcg10=0.5, n_queries=4)
        other = TaskMetrics(r1=100.0, r5=100.0, r10=100.0, mrr=1.0, ndcg10=1.0, n_queries=4)
        report = EvalReport(tasks={TaskId.P2S: metrics, TaskId.S2P: other},
                            mean_r1=75.0, mean_mrr=0.75, mean_ndcg10=0.75)
        assert report.mean_r1 == 75.0
        with pytest.raises(ValidationError):
            EvalReport(tasks={TaskId.P2S: metrics}, mean_r1=60.0, mean_mrr=0.5, mean_ndcg10=0.5)


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
