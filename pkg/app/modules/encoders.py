"""
TriDomain Retrieval Encoders
Frame sampling, tokenization and the transformer encoders for frames,
frame sequences and summary text
"""

import logging
import math
import re
from typing import Iterable, List, NamedTuple, Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, field_validator
from torch import nn

from app.schemas import ModelConfig, ProductInstance

logger = logging.getLogger(__name__)

PAD_TOKEN = "[PAD]"
UNK_TOKEN = "[UNK]"
PAD_ID = 0
UNK_ID = 1

# Single characters always present so unseen words degrade to characters, not [UNK]
BASE_PIECES = list("abcdefghijklmnopqrstuvwxyz0123456789") + list("-;:,.'\"!?()/\\%$&+#@*_")


# =============================================================================
# Frame Sampling
# =============================================================================

class FrameSequence(BaseModel):
    """Exactly n frames (n, H, W, C)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    frames: np.ndarray

    @field_validator("frames")
    @classmethod
    def validate_frames(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 4:
            raise ValueError("frames must be (n, H, W, C)")
        if not np.isfinite(v).all():
            raise ValueError("frames contain non-finite values")
        return v


def frame_indices(num_frames: int, n: int) -> List[int]:
    """Uniform floor(i*T/n) sampling; shorter inputs repeat cyclically"""
    if n < 1:
        raise ValueError("n must be >= 1")
    if num_frames >= n:
        return [(i * num_frames) // n for i in range(n)]
    return [i % num_frames for i in range(n)]


def sample_frames(instance: ProductInstance, n: int) -> FrameSequence:
    """n frames of an instance; an image becomes n identical pseudo frames"""
    indices = frame_indices(instance.num_frames, n)
    return FrameSequence(frames=instance.frames[indices])


def prepare_frames(instances: Sequence[ProductInstance], n: int) -> torch.Tensor:
    """Stacked (B, n, H, W, C) float32 tensor"""
    return torch.from_numpy(np.stack([sample_frames(inst, n).frames for inst in instances]))


# =============================================================================
# Tokenization
# =============================================================================

class Vocabulary:
    """Piece table for greedy longest-match tokenization"""

    def __init__(self, pieces: Sequence[str]):
        pieces = list(pieces)
        if pieces[:2] != [PAD_TOKEN, UNK_TOKEN]:
            raise ValueError("vocabulary must start with [PAD], [UNK]")
        if len(set(pieces)) != len(pieces):
            raise ValueError("vocabulary pieces must be unique")
        self.pieces = pieces
        self.index = {piece: i for i, piece in enumerate(pieces)}
        self.max_piece_len = max((len(p) for p in pieces[2:]), default=1)

    def __len__(self) -> int:
        return len(self.pieces)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocabulary":
        """Specials, base characters, then sorted word pieces of the texts"""
        words = set()
        for text in texts:
            words.update(re.findall(r"[^\W_]+", text.lower()))
        base = list(dict.fromkeys(BASE_PIECES))
        extra = sorted(words.difference(base))
        return cls([PAD_TOKEN, UNK_TOKEN, *base, *extra])


class TokenSequence(BaseModel):
    """Padded ids with a validity mask (True = real token)"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    ids: np.ndarray
    pad_mask: np.ndarray


def tokenize(text: str, m: int, vocab: Vocabulary) -> TokenSequence:
    """
    Greedy longest-match tokenization, head-truncated to m and right-padded

    pad_mask is True on real tokens and False on padding.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    ids: List[int] = []
    for word in text.lower().split():
        i = 0
        while i < len(word) and len(ids) < m:
            for j in range(min(len(word), i + vocab.max_piece_len), i, -1):
                piece_id = vocab.index.get(word[i:j])
                if piece_id is not None:
                    ids.append(piece_id)
                    i = j
                    break
            else:
                ids.append(UNK_ID)
                i += 1
        if len(ids) >= m:
            break

    mask = np.zeros(m, dtype=bool)
    mask[:len(ids)] = True
    padded = np.full(m, PAD_ID, dtype=np.int64)
    padded[:len(ids)] = ids
    return TokenSequence(ids=padded, pad_mask=mask)


def prepare_tokens(texts: Sequence[str], m: int, vocab: Vocabulary):
    """Stacked (B, m) id and mask tensors"""
    sequences = [tokenize(t, m, vocab) for t in texts]
    ids = torch.from_numpy(np.stack([s.ids for s in sequences]))
    valid = torch.from_numpy(np.stack([s.pad_mask for s in sequences]))
    return ids, valid


# =============================================================================
# Transformer Building Blocks
# =============================================================================

def init_weights(module: nn.Module) -> None:
    """Truncated-normal (std 0.02) weights, zero biases, unit LayerNorm"""
    if isinstance(module, nn.Linear):
        nn.init.trunc_normal_(module.weight, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.trunc_normal_(module.weight, std=0.02)
    elif isinstance(module, nn.LayerNorm):
        nn.init.ones_(module.weight)
        nn.init.zeros_(module.bias)


def _zero_linear(linear: nn.Linear) -> None:
    nn.init.zeros_(linear.weight)
    if linear.bias is not None:
        nn.init.zeros_(linear.bias)


class MultiHeadAttention(nn.Module):
    """Scaled dot-product attention with an optional key validity mask"""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by {num_heads} heads")
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        batch, length, _ = x.shape
        return x.view(batch, length, self.num_heads, self.head_dim).transpose(1, 2)

    def forward(self, x: torch.Tensor, context: Optional[torch.Tensor] = None,
                key_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        context = x if context is None else context
        q = self._split(self.q_proj(x))
        k = self._split(self.k_proj(context))
        v = self._split(self.v_proj(context))

        scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], torch.finfo(scores.dtype).min)
        attn = scores.softmax(dim=-1)

        out = (attn @ v).transpose(1, 2).reshape(x.shape[0], x.shape[1], -1)
        return self.out_proj(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mlp_ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * mlp_ratio)
        self.fc2 = nn.Linear(dim * mlp_ratio, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc2(F.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block"""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, key_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_valid=key_valid)
        return x + self.mlp(self.norm2(x))

    def zero_residual_(self) -> None:
        """Turn the block into the identity map"""
        _zero_linear(self.attn.out_proj)
        _zero_linear(self.mlp.fc2)


class CrossAttentionBlock(nn.Module):
    """Pre-norm block whose queries attend to a separate context sequence"""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: int):
        super().__init__()
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, mlp_ratio)

    def forward(self, x: torch.Tensor, context: torch.Tensor,
                context_valid: Optional[torch.Tensor] = None) -> torch.Tensor:
        x = x + self.attn(self.norm_q(x), self.norm_kv(context), key_valid=context_valid)
        return x + self.mlp(self.norm2(x))

    def zero_residual_(self) -> None:
        _zero_linear(self.attn.out_proj)
        _zero_linear(self.mlp.fc2)


class ResidualAttention(nn.Module):
    """Attention-only pre-norm residual step (cross-frame CLS exchange)"""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, num_heads)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.attn(self.norm(x))

    def zero_residual_(self) -> None:
        _zero_linear(self.attn.out_proj)


# =============================================================================
# Feature Bundles
# =============================================================================

class VisualFeatureBundle(NamedTuple):
    v: torch.Tensor  # (B, d_visual) video-level feature
    z: torch.Tensor  # (B, n, d_visual) frame features


class TextFeatureBundle(NamedTuple):
    y0: torch.Tensor     # (B, d_text) CLS feature
    y: torch.Tensor      # (B, m, d_text) token features
    valid: torch.Tensor  # (B, m) True on real tokens


# =============================================================================
# Encoders
# =============================================================================

class FrameEncoder(nn.Module):
    """
    Patch-embedding frame encoder with cross-frame CLS communication

    Each layer first lets every frame's CLS token attend to the CLS tokens
    of all frames of the same video, then runs a standard block over the
    frame's own [CLS, patches] sequence. Output: each frame's CLS state.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        height, width, channels = config.frame_shape
        p = config.patch_size
        if height % p or width % p:
            raise ValueError(f"frame size {height}x{width} not divisible by patch size {p}")
        self.patch_size = p
        self.frame_shape = config.frame_shape
        self.dim = config.d_visual
        num_patches = (height // p) * (width // p)

        self.patch_embed = nn.Linear(p * p * channels, self.dim)
        self.cls_token = nn.Parameter(nn.init.trunc_normal_(torch.empty(1, 1, self.dim), std=0.02))
        self.pos_embed = nn.Parameter(nn.init.trunc_normal_(torch.empty(1, num_patches + 1, self.dim), std=0.02))
        self.cross_frame = nn.ModuleList(
            ResidualAttention(self.dim, config.num_heads) for _ in range(config.frame_layers)
        )
        self.blocks = nn.ModuleList(
            TransformerBlock(self.dim, config.num_heads, config.mlp_ratio) for _ in range(config.frame_layers)
        )
        self.norm = nn.LayerNorm(self.dim)

    def patchify(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, n, H, W, C) -> (B*n, patches, p*p*C)"""
        batch, n, height, width, channels = frames.shape
        p = self.patch_size
        if height % p or width % p:
            raise ValueError(f"frame size {height}x{width} not divisible by patch size {p}")
        x = frames.reshape(batch * n, height // p, p, width // p, p, channels)
        return x.permute(0, 1, 3, 2, 4, 5).reshape(batch * n, (height // p) * (width // p), p * p * channels)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        batch, n = frames.shape[:2]
        if tuple(frames.shape[2:]) != tuple(self.frame_shape):
            raise ValueError(f"expected frames of shape {self.frame_shape}, got {tuple(frames.shape[2:])}")
        x = self.patch_embed(self.patchify(frames))
        x = torch.cat([self.cls_token.expand(batch * n, -1, -1), x], dim=1) + self.pos_embed

        for cross, block in zip(self.cross_frame, self.blocks):
            cls = cross(x[:, 0].reshape(batch, n, self.dim))
            x = torch.cat([cls.reshape(batch * n, 1, self.dim), x[:, 1:]], dim=1)
            x = block(x)

        return self.norm(x[:, 0]).reshape(batch, n, self.dim)


class TemporalAggregator(nn.Module):
    """Transformer blocks over frame features, then average pooling"""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.max_frames = config.n_frames
        # zero-initialized so identity blocks pool the raw frame features
        self.temporal_pos = nn.Parameter(torch.zeros(1, config.n_frames, config.d_visual))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_visual, config.num_heads, config.mlp_ratio)
            for _ in range(config.temporal_blocks)
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        n = z.shape[1]
        if n > self.max_frames:
            raise ValueError(f"{n} frames exceed the configured {self.max_frames}")
        x = z + self.temporal_pos[:, :n]
        for block in self.blocks:
            x = block(x)
        return x.mean(dim=1)


class TokenEncoder(nn.Module):
    """Token embedding + learned positions + CLS, pad-masked transformer"""

    def __init__(self, config: ModelConfig, vocab_size: int):
        super().__init__()
        if vocab_size < 2:
            raise ValueError("vocabulary is empty; build one before creating the text encoder")
        self.embed = nn.Embedding(vocab_size, config.d_text)
        self.cls_token = nn.Parameter(nn.init.trunc_normal_(torch.empty(1, 1, config.d_text), std=0.02))
        self.pos_embed = nn.Parameter(nn.init.trunc_normal_(torch.empty(1, config.m_tokens + 1, config.d_text), std=0.02))
        self.blocks = nn.ModuleList(
            TransformerBlock(config.d_text, config.num_heads, config.mlp_ratio)
            for _ in range(config.text_layers)
        )
        self.norm = nn.LayerNorm(config.d_text)

    def forward(self, ids: torch.Tensor, valid: torch.Tensor) -> TextFeatureBundle:
        batch, m = ids.shape
        emb = self.embed(ids)
        # masked positions carry the pad embedding whatever their id
        emb = torch.where(valid[..., None], emb, self.embed.weight[PAD_ID].expand_as(emb))
        x = torch.cat([self.cls_token.expand(batch, -1, -1), emb], dim=1) + self.pos_embed[:, :m + 1]
        key_valid = torch.cat([torch.ones(batch, 1, dtype=torch.bool, device=valid.device), valid], dim=1)
        for block in self.blocks:
            x = block(x, key_valid=key_valid)
        x = self.norm(x)
        return TextFeatureBundle(y0=x[:, 0], y=x[:, 1:], valid=valid)


# =============================================================================
# Functional Entry Points
# =============================================================================

def encode_frames(fs: FrameSequence, encoder: FrameEncoder) -> torch.Tensor:
    """(n, d_visual) frame features of one sequence"""
    frames = torch.as_tensor(fs.frames, dtype=encoder.patch_embed.weight.dtype)
    return encoder(frames[None])[0]


def temporal_aggregate(z: torch.Tensor, aggregator: TemporalAggregator) -> torch.Tensor:
    """(n, d) frame features -> (d,) video feature"""
    return aggregator(z[None])[0]


def encode_tokens(ts: TokenSequence, encoder: TokenEncoder) -> TextFeatureBundle:
    """Unbatched text features: y0 (d_text,), y (m, d_text)"""
    ids = torch.from_numpy(ts.ids)[None]
    valid = torch.from_numpy(ts.pad_mask)[None]
    bundle = encoder(ids, valid)
    return TextFeatureBundle(y0=bundle.y0[0], y=bundle.y[0], valid=bundle.valid[0])
