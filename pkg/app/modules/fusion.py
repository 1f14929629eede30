"""
TriDomain Retrieval Fusion
Projection of visual/text features to a common width, the six fusion
variants, and the full per-domain embedding model
"""

import logging
import math
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator
from torch import nn

from app.modules.encoders import (
    CrossAttentionBlock,
    FrameEncoder,
    TemporalAggregator,
    TextFeatureBundle,
    TokenEncoder,
    TransformerBlock,
    VisualFeatureBundle,
    Vocabulary,
    init_weights,
    prepare_frames,
    prepare_tokens,
)
from app.modules.summarization import summary_text
from app.schemas import (
    DomainId,
    EmbeddingRecord,
    FusionVariant,
    Modality,
    ModelConfig,
    ProductInstance,
    SharingMode,
    SharingScope,
    SummaryRecord,
)

logger = logging.getLogger(__name__)

SHARED_KEY = "shared"


# =============================================================================
# Output Types
# =============================================================================

class MultimodalEmbedding(BaseModel):
    """L2-normalized embedding e(x, t)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    e: np.ndarray

    @field_validator("e")
    @classmethod
    def validate_norm(cls, v: np.ndarray) -> np.ndarray:
        norm = float(np.linalg.norm(np.asarray(v, dtype=np.float64)))
        if abs(norm - 1.0) > 1e-6:
            raise ValueError(f"embedding norm {norm:.8f} is not 1")
        return v


# =============================================================================
# Fusion Blocks
# =============================================================================

class CoAttentionBlock(nn.Module):
    """Two parallel cross-attention streams: text<-visual and visual<-text"""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.text_stream = CrossAttentionBlock(dim, num_heads, mlp_ratio)
        self.visual_stream = CrossAttentionBlock(dim, num_heads, mlp_ratio)

    def forward(self, visual: torch.Tensor, text: torch.Tensor,
                text_valid: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        new_text = self.text_stream(text, visual)
        new_visual = self.visual_stream(visual, text, context_valid=text_valid)
        return new_visual, new_text

    def zero_residual_(self) -> None:
        self.text_stream.zero_residual_()
        self.visual_stream.zero_residual_()


class MultimodalFusion(nn.Module):
    """
    Variant-specific fusion producing the pre-head feature

    ours: self-attention over [v, z1..zn, y0, y1..ym] with segment embeddings
    sum / cat: no transformer, combine v and y0 directly
    xa_t_as_q / xa_v_as_q: cross-attention with text / visual as queries
    coa: co-attention, both cross-attention streams per block
    """

    def __init__(self, variant: Union[FusionVariant, str], dim: int, num_heads: int,
                 mlp_ratio: int, num_blocks: int):
        super().__init__()
        self.variant = FusionVariant(variant)
        self.dim = dim
        self.segment = None

        if self.variant is FusionVariant.OURS:
            # zero-initialized: identity blocks reduce to the sum variant
            self.segment = nn.Parameter(torch.zeros(2, dim))
            block_cls = TransformerBlock
        elif self.variant in (FusionVariant.XA_T_AS_Q, FusionVariant.XA_V_AS_Q):
            block_cls = CrossAttentionBlock
        elif self.variant is FusionVariant.COA:
            block_cls = CoAttentionBlock
        else:
            block_cls = None
        self.blocks = nn.ModuleList(
            block_cls(dim, num_heads, mlp_ratio) for _ in range(num_blocks)
        ) if block_cls else nn.ModuleList()

    @property
    def output_width(self) -> int:
        return 2 * self.dim if self.variant is FusionVariant.CAT else self.dim

    def zero_residual_(self) -> None:
        for block in self.blocks:
            block.zero_residual_()

    def forward(self, visual_seq: torch.Tensor, text_seq: torch.Tensor,
                text_valid: torch.Tensor) -> torch.Tensor:
        """
        Args:
            visual_seq: (B, n+1, d) projected [v, z1..zn]
            text_seq: (B, m+1, d) projected [y0, y1..ym]
            text_valid: (B, m+1) True on CLS and real tokens

        Returns:
            (B, output_width) feature fed to the final Linear
        """
        v_hat, y0_hat = visual_seq[:, 0], text_seq[:, 0]

        if self.variant is FusionVariant.SUM:
            return v_hat + y0_hat
        if self.variant is FusionVariant.CAT:
            return torch.cat([v_hat, y0_hat], dim=-1)

        if self.variant is FusionVariant.OURS:
            n_visual = visual_seq.shape[1]
            x = torch.cat([visual_seq + self.segment[0], text_seq + self.segment[1]], dim=1)
            key_valid = torch.cat([
                torch.ones(visual_seq.shape[:2], dtype=torch.bool, device=text_valid.device),
                text_valid,
            ], dim=1)
            for block in self.blocks:
                x = block(x, key_valid=key_valid)
            return x[:, 0] + x[:, n_visual]

        if self.variant is FusionVariant.XA_T_AS_Q:
            x = text_seq
            for block in self.blocks:
                x = block(x, visual_seq)
            return x[:, 0]

        if self.variant is FusionVariant.XA_V_AS_Q:
            x = visual_seq
            for block in self.blocks:
                x = block(x, text_seq, context_valid=text_valid)
            return x[:, 0]

        visual, text = visual_seq, text_seq
        for block in self.blocks:
            visual, text = block(visual, text, text_valid)
        return visual[:, 0] + text[:, 0]


def project_features(vb: VisualFeatureBundle, tb: TextFeatureBundle, visual_proj: nn.Linear,
                     text_proj: nn.Linear) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """
    Map both modalities to the fusion width, keeping sequence order

    Returns:
        ([v, z1..zn], [y0, y1..ym], text validity incl. CLS)
    """
    visual_seq = visual_proj(torch.cat([vb.v[:, None], vb.z], dim=1))
    text_seq = text_proj(torch.cat([tb.y0[:, None], tb.y], dim=1))
    cls_valid = torch.ones(tb.valid.shape[0], 1, dtype=torch.bool, device=tb.valid.device)
    return visual_seq, text_seq, torch.cat([cls_valid, tb.valid], dim=1)


def fuse(variant: Union[FusionVariant, str], visual_seq: torch.Tensor, text_seq: torch.Tensor,
         text_valid: torch.Tensor, fusion: MultimodalFusion, head: nn.Linear) -> torch.Tensor:
    """Unit-norm embeddings (B, d_embed) for the requested variant"""
    variant = FusionVariant(variant)
    if variant is not fusion.variant:
        raise ValueError(f"fusion module built for {fusion.variant.value}, not {variant.value}")
    return F.normalize(head(fusion(visual_seq, text_seq, text_valid)), dim=-1)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# =============================================================================
# Branch Model
# =============================================================================

class BranchTrunk(nn.Module):
    """Encoders, projections and fusion of one domain branch"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.modality = config.modality
        self.text_dropout = config.text_dropout
        uses_visual = config.modality in (Modality.MULTIMODAL, Modality.VISUAL)
        uses_text = config.modality in (Modality.MULTIMODAL, Modality.TEXT)

        self.frame_encoder = FrameEncoder(config) if uses_visual else None
        self.temporal = TemporalAggregator(config) if uses_visual else None
        self.text_encoder = TokenEncoder(config, len(config.vocab)) if uses_text else None
        self.text_proj = nn.Linear(config.d_text, config.fusion_width) if uses_text else None
        self.visual_proj = None
        self.fusion = None
        if config.modality is Modality.MULTIMODAL:
            self.visual_proj = nn.Linear(config.d_visual, config.fusion_width)
            self.fusion = MultimodalFusion(config.fusion_variant, config.fusion_width,
                                           config.num_heads, config.mlp_ratio, config.fusion_blocks)

    @property
    def output_width(self) -> int:
        if self.fusion is not None:
            return self.fusion.output_width
        if self.temporal is not None:
            return self.temporal.temporal_pos.shape[-1]
        return self.text_proj.out_features

    def encode_visual(self, frames: torch.Tensor) -> VisualFeatureBundle:
        z = self.frame_encoder(frames)
        return VisualFeatureBundle(v=self.temporal(z), z=z)

    def drop_text(self, text_seq: torch.Tensor) -> torch.Tensor:
        """Zero whole text sequences at rate text_dropout while training"""
        if not self.training or self.text_dropout == 0.0:
            return text_seq
        keep = torch.rand(text_seq.shape[0], 1, 1, device=text_seq.device) >= self.text_dropout
        return text_seq * keep.to(text_seq.dtype)

    def forward(self, frames: Optional[torch.Tensor], token_ids: Optional[torch.Tensor],
                token_valid: Optional[torch.Tensor]) -> torch.Tensor:
        if self.modality is Modality.VISUAL:
            return self.encode_visual(frames).v
        tb = self.text_encoder(token_ids, token_valid)
        if self.modality is Modality.TEXT:
            return self.text_proj(tb.y0)
        visual_seq, text_seq, text_valid = project_features(
            self.encode_visual(frames), tb, self.visual_proj, self.text_proj
        )
        return self.fusion(visual_seq, self.drop_text(text_seq), text_valid)


class ProductEmbeddingModel(nn.Module):
    """
    Three-branch embedding model with configurable parameter sharing

    shared: one trunk, one head, one classifier for P, S and L.
    branch_specific + final_linear: shared trunk, per-domain head and classifier.
    branch_specific + all: a full trunk per domain as well.
    """

    def __init__(self, config: ModelConfig, num_classes: int = 0):
        super().__init__()
        self.config = config
        self.num_classes = num_classes
        domain_keys = [d.value for d in DomainId.ordered()]
        split = config.sharing is SharingMode.BRANCH_SPECIFIC
        trunk_keys = domain_keys if split and config.sharing_scope is SharingScope.ALL else [SHARED_KEY]
        head_keys = domain_keys if split else [SHARED_KEY]

        self.trunks = nn.ModuleDict({key: BranchTrunk(config) for key in trunk_keys})
        width = next(iter(self.trunks.values())).output_width
        self.heads = nn.ModuleDict({key: nn.Linear(width, config.d_embed) for key in head_keys})
        self.classifiers = nn.ModuleDict(
            {key: nn.Linear(config.d_embed, num_classes) for key in head_keys}
        ) if num_classes > 0 else None
        self.apply(init_weights)
        self.log_temperature = nn.Parameter(torch.tensor(math.log(config.temperature_init)))

    @staticmethod
    def _select(modules: nn.ModuleDict, domain: Union[DomainId, str]) -> nn.Module:
        if SHARED_KEY in modules:
            return modules[SHARED_KEY]
        return modules[DomainId(domain).value]

    @property
    def temperature(self) -> torch.Tensor:
        return self.log_temperature.exp()

    def trunk(self, domain: Union[DomainId, str]) -> BranchTrunk:
        return self._select(self.trunks, domain)

    def head(self, domain: Union[DomainId, str]) -> nn.Linear:
        return self._select(self.heads, domain)

    def forward(self, frames: Optional[torch.Tensor], token_ids: Optional[torch.Tensor],
                token_valid: Optional[torch.Tensor], domain: Union[DomainId, str]) -> torch.Tensor:
        """Unit-norm embeddings (B, d_embed) for a batch of one domain"""
        features = self.trunk(domain)(frames, token_ids, token_valid)
        return F.normalize(self.head(domain)(features), dim=-1)

    def classify(self, embeddings: torch.Tensor, domain: Union[DomainId, str]) -> torch.Tensor:
        if self.classifiers is None:
            raise RuntimeError("model was built without a classification head")
        return self._select(self.classifiers, domain)(embeddings)

    def zero_fusion_residuals_(self) -> None:
        for trunk in self.trunks.values():
            if trunk.fusion is not None:
                trunk.fusion.zero_residual_()

    @property
    def vocabulary(self) -> Optional[Vocabulary]:
        return Vocabulary(self.config.vocab) if self.config.vocab else None


# =============================================================================
# Inference
# =============================================================================

def prepare_inputs(
    instances: Sequence[ProductInstance],
    summaries: Optional[Mapping[str, SummaryRecord]],
    config: ModelConfig,
    vocab: Optional[Vocabulary] = None
) -> Tuple[Optional[torch.Tensor], Optional[torch.Tensor], Optional[torch.Tensor]]:
    """Frames and token tensors for a batch, as the configured modality needs them"""
    frames = ids = valid = None
    if config.modality in (Modality.MULTIMODAL, Modality.VISUAL):
        frames = prepare_frames(instances, config.n_frames)
    if config.modality in (Modality.MULTIMODAL, Modality.TEXT):
        if summaries is None:
            raise ValueError("text modality requires summaries")
        vocab = vocab or Vocabulary(config.vocab)
        missing = [inst.instance_id for inst in instances if inst.instance_id not in summaries]
        if missing:
            raise ValueError(f"no summary for instance {missing[0]}")
        texts = [summary_text(summaries[inst.instance_id]) for inst in instances]
        ids, valid = prepare_tokens(texts, config.m_tokens, vocab)
    return frames, ids, valid


def embed_instance(
    instance: ProductInstance,
    summary: Optional[SummaryRecord],
    config: ModelConfig,
    model: ProductEmbeddingModel
) -> MultimodalEmbedding:
    """Full pipeline for one instance; non-ok summaries encode their fallback text"""
    summaries = {instance.instance_id: summary} if summary is not None else None
    frames, ids, valid = prepare_inputs([instance], summaries, config)
    model.eval()
    with torch.no_grad():
        e = model(frames, ids, valid, instance.domain)[0]
    return MultimodalEmbedding(e=e.double().numpy())


def embed_dataset(
    instances: Sequence[ProductInstance],
    summaries: Optional[Mapping[str, SummaryRecord]],
    model: ProductEmbeddingModel,
    batch_size: int = 32
) -> List[EmbeddingRecord]:
    """Embed instances in per-domain batches; output follows input order"""
    config = model.config
    vocab = model.vocabulary
    vectors: Dict[int, np.ndarray] = {}
    model.eval()

    with torch.no_grad():
        for domain in DomainId.ordered():
            positions = [i for i, inst in enumerate(instances) if inst.domain is domain]
            for start in range(0, len(positions), batch_size):
                chunk = positions[start:start + batch_size]
                frames, ids, valid = prepare_inputs([instances[i] for i in chunk], summaries, config, vocab)
                embeddings = model(frames, ids, valid, domain).double().numpy()
                for i, e in zip(chunk, embeddings):
                    vectors[i] = e

    records = [
        EmbeddingRecord.from_unnormalized(inst.product_id, inst.instance_id, inst.domain, vectors[i])
        for i, inst in enumerate(instances)
    ]
    logger.info(f"✓ Embedded {len(records)} instances")
    return records
