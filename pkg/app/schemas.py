"""
TriDomain Retrieval - Data Schemas
Pydantic models for instances, summaries, embeddings, configs and reports
"""

import math
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


# Raw text of an instance whose ASR transcript is missing
ASR_MISSING_TEXT = "\\N\\N"

# Encoder text for an LLM that produced no usable output; used as is
NO_OUTPUT_TEXT = "Product name: Unknown; Features: Unknown"


# ============================================================================
# Enumerations
# ============================================================================

class DomainId(str, Enum):
    """E-commerce domain of an instance; iteration order is P < S < L"""
    P = "P"  # product page: image + title
    S = "S"  # short video
    L = "L"  # live stream

    @classmethod
    def ordered(cls) -> List["DomainId"]:
        return [cls.P, cls.S, cls.L]

    @property
    def has_asr(self) -> bool:
        return self is not DomainId.P


class SummaryStatus(str, Enum):
    """Outcome of summarizing one raw text"""
    OK = "ok"
    NO_OUTPUT = "no_output"
    ASR_MISSING = "asr_missing"


class SummaryView(str, Enum):
    """Which fields of a summary reach the text encoder"""
    FULL = "full"
    NAME_ONLY = "name_only"
    FEATURES_ONLY = "features_only"
    RAW = "raw"


class SummarizerKind(str, Enum):
    """Text-input source"""
    LLM_REMOTE = "llm_remote"
    LLM_MOCK = "llm_mock"
    KEYWORD_BASELINE = "keyword_baseline"
    RAW_PASSTHROUGH = "raw_passthrough"
    NAME_ONLY = "name_only"
    FEATURES_ONLY = "features_only"


class FusionVariant(str, Enum):
    """Multimodal fusion head"""
    OURS = "ours"
    SUM = "sum"
    CAT = "cat"
    XA_T_AS_Q = "xa_t_as_q"
    XA_V_AS_Q = "xa_v_as_q"
    COA = "coa"


class SharingMode(str, Enum):
    """Parameter sharing across the three domain branches"""
    SHARED = "shared"
    BRANCH_SPECIFIC = "branch_specific"


class SharingScope(str, Enum):
    """Layers that become branch-specific when not shared"""
    FINAL_LINEAR = "final_linear"
    ALL = "all"


class Modality(str, Enum):
    """Inputs that feed the embedding"""
    MULTIMODAL = "multimodal"
    VISUAL = "visual"
    TEXT = "text"


class TaskId(str, Enum):
    """Cross-domain retrieval task: query domain 2 gallery domain"""
    P2S = "P2S"
    P2L = "P2L"
    S2P = "S2P"
    S2L = "S2L"
    L2P = "L2P"
    L2S = "L2S"

    @property
    def query_domain(self) -> DomainId:
        return DomainId(self.value[0])

    @property
    def gallery_domain(self) -> DomainId:
        return DomainId(self.value[2])


class Command(str, Enum):
    """CLI commands"""
    GENERATE = "generate"
    SUMMARIZE = "summarize"
    TRAIN = "train"
    EMBED = "embed"
    EVALUATE = "evaluate"
    REPORT = "report"
    GRADCHECK = "gradcheck"
    SUMMARY_ACCURACY = "summary-accuracy"


# ============================================================================
# Core Records
# ============================================================================

class ProductInstance(BaseModel):
    """One product sample in one domain"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    product_id: str = Field(..., description="Opaque product identifier")
    instance_id: str = Field(..., description="Opaque instance identifier")
    domain: DomainId
    frames: np.ndarray = Field(..., description="Frame tensor (T, H, W, C), T=1 for P")
    raw_text: str = Field(default="", description="Title for P, raw ASR transcript for S/L")

    @field_validator("product_id")
    @classmethod
    def validate_product_id(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("product_id empty")
        return v

    @field_validator("instance_id")
    @classmethod
    def validate_instance_id(cls, v: str) -> str:
        if not v.strip():
            raise ValueError("instance_id empty")
        return v

    @field_validator("frames")
    @classmethod
    def validate_frames(cls, v: np.ndarray, info) -> np.ndarray:
        arr = np.array(v, dtype=np.float32)
        if arr.ndim != 4:
            raise ValueError(f"frames must have rank 4 (T, H, W, C), got rank {arr.ndim}")
        if any(dim < 1 for dim in arr.shape):
            raise ValueError(f"frames dims must be positive, got {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("frames contain non-finite values")
        if info.data.get("domain") is DomainId.P and arr.shape[0] != 1:
            raise ValueError("frames must hold a single image for domain P")
        arr.flags.writeable = False
        return arr

    @property
    def num_frames(self) -> int:
        return int(self.frames.shape[0])


class SummaryRecord(BaseModel):
    """Summarizer output for one raw text"""

    model_config = ConfigDict(frozen=True)

    instance_id: Optional[str] = None
    product_name: str = ""
    features: List[str] = Field(default_factory=list)
    status: SummaryStatus
    signal_level: float = Field(default=0.0, ge=0.0)
    view: SummaryView = SummaryView.FULL

    @model_validator(mode="after")
    def validate_status(self) -> "SummaryRecord":
        name = self.product_name.strip()
        if self.status is SummaryStatus.OK:
            if self.view is not SummaryView.RAW and (not name or name.lower() == "unknown"):
                raise ValueError("ok summary requires a product name other than 'Unknown'")
            if not math.isfinite(self.signal_level) or self.signal_level <= 0.0:
                raise ValueError("ok summary requires a positive signal_level")
        else:
            if self.signal_level != 0.0:
                raise ValueError(f"signal_level must be 0 for status {self.status.value}")
            if self.status is SummaryStatus.ASR_MISSING and (name or self.features):
                raise ValueError("asr_missing summary must have empty fields")
        return self


class EmbeddingRecord(BaseModel):
    """Unit-norm embedding of one instance"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    product_id: str
    instance_id: str
    domain: DomainId
    vector: np.ndarray

    @field_validator("product_id", "instance_id")
    @classmethod
    def validate_ids(cls, v: str, info) -> str:
        if not v.strip():
            raise ValueError(f"{info.field_name} empty")
        return v

    @field_validator("vector")
    @classmethod
    def validate_vector(cls, v: np.ndarray) -> np.ndarray:
        arr = np.array(v, dtype=np.float32)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("vector must be a non-empty 1-D array")
        if not np.isfinite(arr).all():
            raise ValueError("vector contains non-finite values")
        norm = float(np.linalg.norm(arr.astype(np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"vector norm {norm:.8f} is not 1")
        arr.flags.writeable = False
        return arr

    @classmethod
    def from_unnormalized(cls, product_id: str, instance_id: str, domain: DomainId,
                          vector: np.ndarray) -> "EmbeddingRecord":
        """Normalize in double precision before the float32 cast"""
        v = np.asarray(vector, dtype=np.float64)
        return cls(product_id=product_id, instance_id=instance_id, domain=domain,
                   vector=(v / np.linalg.norm(v)).astype(np.float32))


class LlmExchange(BaseModel):
    """One request/response pair with the remote summarizer"""

    prompt: str
    completion: str
    latency_ms: int = Field(..., ge=0)
    attempt: int = Field(..., ge=1)
    correlation_id: str


class GroundTruthRecord(BaseModel):
    """Generator labels for one product"""

    product_id: str
    true_name: str
    true_attributes: List[str]


# ============================================================================
# Configurations
# ============================================================================

class ModelConfig(BaseModel):
    """Encoder and fusion hyperparameters (desk-scale defaults)"""

    n_frames: int = Field(default=8, ge=1)
    m_tokens: int = Field(default=32, ge=1)
    d_visual: int = Field(default=32, ge=1, description="Common fusion width")
    d_text: int = Field(default=48, ge=1)
    d_embed: int = Field(default=16, ge=1)
    fusion_variant: FusionVariant = FusionVariant.OURS
    sharing: SharingMode = SharingMode.SHARED
    sharing_scope: SharingScope = SharingScope.FINAL_LINEAR
    modality: Modality = Modality.MULTIMODAL
    fusion_blocks: int = Field(default=4, ge=1)
    temporal_blocks: int = Field(default=4, ge=1)
    text_layers: int = Field(default=2, ge=1)
    frame_layers: int = Field(default=2, ge=1)
    num_heads: int = Field(default=4, ge=1)
    mlp_ratio: int = Field(default=2, ge=1)
    patch_size: int = Field(default=4, ge=1)
    frame_shape: Tuple[int, int, int] = Field(default=(16, 16, 3))
    temperature_init: float = Field(default=0.07, gt=0.0)
    text_dropout: float = Field(default=0.5, ge=0.0, le=1.0,
                                description="Train-time rate of zeroing a sample's fused text sequence")
    vocab: List[str] = Field(default_factory=list, description="Tokenizer piece table")

    @field_validator("frame_shape")
    @classmethod
    def validate_frame_shape(cls, v: Tuple[int, int, int]) -> Tuple[int, int, int]:
        if any(dim < 1 for dim in v):
            raise ValueError(f"frame_shape dims must be positive, got {v}")
        return v

    @model_validator(mode="after")
    def validate_heads(self) -> "ModelConfig":
        for name in ("d_visual", "d_text"):
            if getattr(self, name) % self.num_heads:
                raise ValueError(f"{name} must be divisible by num_heads={self.num_heads}")
        return self

    @property
    def fusion_width(self) -> int:
        """Both projections map into the visual width"""
        return self.d_visual

    @classmethod
    def full_scale(cls, **overrides) -> "ModelConfig":
        """Full-scale dimensions (512/768/128, six text layers)"""
        values = dict(d_visual=512, d_text=768, d_embed=128, n_frames=8, m_tokens=32,
                      fusion_blocks=4, temporal_blocks=4, text_layers=6, num_heads=8,
                      mlp_ratio=4)
        values.update(overrides)
        return cls(**values)


class SynthConfig(BaseModel):
    """Synthetic tri-domain corpus parameters"""

    num_products: int = Field(default=64, ge=2)
    instances_per_domain: int = Field(default=3, ge=1)
    frame_shape: Tuple[int, int, int] = Field(default=(16, 16, 3))
    visual_intra_variance: float = Field(default=0.5, ge=0.0)
    visual_inter_similarity: float = Field(default=0.5, ge=0.0, lt=1.0)
    asr_noise_ratio: float = Field(default=0.9, ge=0.0, le=1.0)
    no_output_rate: float = Field(default=0.0, ge=0.0, le=1.0)
    asr_missing_rate: float = Field(default=0.02, ge=0.0, le=1.0)
    seed: int = Field(default=0)
    test_fraction: float = Field(default=0.1, gt=0.0, lt=1.0)
    short_video_frames: int = Field(default=12, ge=1)
    live_stream_frames: int = Field(default=24, ge=1)
    distractor_size: int = Field(default=4, ge=1)
    title_attributes: int = Field(default=2, ge=0)

    @model_validator(mode="after")
    def validate_distractor(self) -> "SynthConfig":
        height, width, _ = self.frame_shape
        if self.distractor_size > min(height, width):
            raise ValueError("distractor_size exceeds the frame size")
        return self


# Peak learning rates for full-scale runs with pretrained encoders
FULL_SCALE_LEARNING_RATES = {"text": 5e-5, "visual": 1e-5, "fusion": 5e-5, "other": 5e-3}


class TrainingConfig(BaseModel):
    """Joint training hyperparameters"""

    model: ModelConfig = Field(default_factory=ModelConfig)
    excluded_domains: List[DomainId] = Field(default_factory=list)
    lr_text: float = Field(default=1e-3, gt=0.0)
    lr_visual: float = Field(default=1e-3, gt=0.0)
    lr_fusion: float = Field(default=1e-3, gt=0.0)
    lr_other: float = Field(default=5e-3, gt=0.0)
    weight_decay: float = Field(default=0.01, ge=0.0)
    betas: Tuple[float, float] = Field(default=(0.9, 0.999))
    warmup_epochs: int = Field(default=2, ge=0)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=16, ge=2)
    seed: int = Field(default=0)
    checkpoint_every: int = Field(default=0, ge=0, description="Epoch interval; 0 = final only")

    @model_validator(mode="after")
    def validate_domains(self) -> "TrainingConfig":
        present = [d for d in DomainId.ordered() if d not in self.excluded_domains]
        if len(present) < 2:
            raise ValueError("at least two domains must remain after exclusion")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs cannot exceed epochs")
        return self

    @property
    def present_domains(self) -> List[DomainId]:
        return [d for d in DomainId.ordered() if d not in self.excluded_domains]

    @property
    def peak_learning_rates(self) -> List[float]:
        """Group order: text encoder, visual encoder, fusion blocks, other layers"""
        return [self.lr_text, self.lr_visual, self.lr_fusion, self.lr_other]

    def with_full_scale_peaks(self) -> "TrainingConfig":
        return self.model_copy(update=dict(
            lr_text=FULL_SCALE_LEARNING_RATES["text"],
            lr_visual=FULL_SCALE_LEARNING_RATES["visual"],
            lr_fusion=FULL_SCALE_LEARNING_RATES["fusion"],
            lr_other=FULL_SCALE_LEARNING_RATES["other"],
            warmup_epochs=4,
        ))


# ============================================================================
# Training Outputs
# ============================================================================

class LossBreakdown(BaseModel):
    """The six loss terms of one step (or the mean over an epoch)"""

    contrastive: Dict[str, float] = Field(default_factory=dict, description="PS, PL, SL")
    classification: Dict[str, float] = Field(default_factory=dict, description="P, S, L")
    total: float
    temperature: float = Field(..., gt=0.0)

    @model_validator(mode="after")
    def validate_terms(self) -> "LossBreakdown":
        terms = list(self.contrastive.values()) + list(self.classification.values())
        for value in terms:
            if not math.isfinite(value) or value < 0.0:
                raise ValueError(f"loss term must be finite and non-negative, got {value}")
        if abs(self.total - math.fsum(terms)) > 1e-9 * max(1.0, abs(self.total)):
            raise ValueError("total must equal the sum of its terms")
        return self


class EpochLog(BaseModel):
    """Per-epoch loss record with learning rates per parameter group"""

    epoch: int = Field(..., ge=0)
    losses: LossBreakdown
    learning_rates: List[float]


class GradCheckResult(BaseModel):
    """Finite-difference gradient verification outcome"""

    max_rel_error: float
    per_tensor: Dict[str, float]
    epsilon: float
    samples_per_tensor: int
    checked_entries: int


# ============================================================================
# Evaluation Outputs
# ============================================================================

class TaskMetrics(BaseModel):
    """Retrieval metrics for one task (recall in percent)"""

    r1: float = Field(..., ge=0.0, le=100.0)
    r5: float = Field(..., ge=0.0, le=100.0)
    r10: float = Field(..., ge=0.0, le=100.0)
    mrr: float = Field(..., ge=0.0, le=1.0)
    ndcg10: float = Field(..., ge=0.0, le=1.0)
    n_queries: int = Field(..., ge=0)
    n_excluded: int = Field(default=0, ge=0, description="Queries without any relevant item")

    @model_validator(mode="after")
    def validate_monotone(self) -> "TaskMetrics":
        if not (self.r1 <= self.r5 + 1e-9 and self.r5 <= self.r10 + 1e-9):
            raise ValueError("recall must be non-decreasing in k")
        return self


class DistanceStats(BaseModel):
    """Intra-/inter-product cosine distance summary"""

    intra_mean: Optional[float] = None
    inter_mean: Optional[float] = None
    intra_pairs: int = 0
    inter_pairs: int = 0
    inter_sampled: bool = False
    singleton_products: int = 0
    bin_width: float = 0.02
    intra_histogram: List[int] = Field(default_factory=list)
    inter_histogram: List[int] = Field(default_factory=list)


class SignalBucketRow(BaseModel):
    """One row of the signal-level robustness table"""

    bucket: str
    count: int = Field(..., ge=0)
    percentage: float = Field(..., ge=0.0, le=100.0)
    r1: Optional[float] = None


class EvalReport(BaseModel):
    """Full evaluation report"""

    tasks: Dict[TaskId, TaskMetrics]
    mean_r1: float
    mean_mrr: float
    mean_ndcg10: float
    distance_stats: Optional[DistanceStats] = None
    signal_tables: Dict[TaskId, List[SignalBucketRow]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def validate_means(self) -> "EvalReport":
        if self.tasks:
            expected = math.fsum(m.r1 for m in self.tasks.values()) / len(self.tasks)
            if abs(expected - self.mean_r1) > 1e-9:
                raise ValueError("mean_r1 must be the mean of the task R1 values")
        return self


class SummarizerAccuracy(BaseModel):
    """Name/attribute extraction accuracy for one domain (or overall)"""

    domain: str
    n_samples: int = Field(..., ge=1)
    name_accuracy: float = Field(..., ge=0.0, le=1.0)
    attr_recall: float = Field(..., ge=0.0, le=1.0)
    attr_accuracy: Optional[float] = Field(default=None, ge=0.0, le=1.0)
