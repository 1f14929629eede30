"""
TriDomain Retrieval - Vector Search Service
Exact cosine similarity and ranking over stored unit-norm embeddings
"""

import logging
from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict

from app.config import settings
from app.schemas import EmbeddingRecord

logger = logging.getLogger(__name__)


# =============================================================================
# Similarity
# =============================================================================

class SimilarityMatrix(BaseModel):
    """Query x gallery cosine scores with the ids and product labels of both sides"""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    scores: np.ndarray
    query_ids: List[str]
    gallery_ids: List[str]
    query_products: List[str]
    gallery_products: List[str]


def stack_vectors(records: Sequence[EmbeddingRecord]) -> np.ndarray:
    """Records as a float64 (N, d) matrix"""
    return np.stack([r.vector.astype(np.float64) for r in records])


def similarity_matrix(
    queries: Sequence[EmbeddingRecord],
    gallery: Sequence[EmbeddingRecord],
    block_size: Optional[int] = None
) -> SimilarityMatrix:
    """
    Dot products between every query and gallery embedding

    Rows are computed in blocks of block_size queries; a fixed block size
    gives bit-identical scores across runs.

    Args:
        queries: Unit-norm query records
        gallery: Unit-norm gallery records
        block_size: Queries per block (default from settings)

    Returns:
        SimilarityMatrix with scores[q, g] = <q, g>
    """
    if not queries:
        raise ValueError("query set is empty")
    if not gallery:
        raise ValueError("gallery set is empty")

    block_size = block_size or settings.similarity_block_size
    q = stack_vectors(queries)
    g = stack_vectors(gallery)
    if q.shape[1] != g.shape[1]:
        raise ValueError(f"dimension mismatch: queries {q.shape[1]} vs gallery {g.shape[1]}")

    scores = np.empty((q.shape[0], g.shape[0]), dtype=np.float64)
    for start in range(0, q.shape[0], block_size):
        end = min(start + block_size, q.shape[0])
        scores[start:end] = q[start:end] @ g.T

    logger.debug(f"Similarity matrix {scores.shape} computed (block={block_size})")
    return SimilarityMatrix(
        scores=scores,
        query_ids=[r.instance_id for r in queries],
        gallery_ids=[r.instance_id for r in gallery],
        query_products=[r.product_id for r in queries],
        gallery_products=[r.product_id for r in gallery],
    )


# =============================================================================
# Ranking
# =============================================================================

def rank_gallery(row: np.ndarray, gallery_ids: Optional[Sequence[str]] = None) -> np.ndarray:
    """
    Gallery positions ordered by descending score

    Ties keep ascending gallery index (stable sort on the negated row).
    gallery_ids, when given, must align with the row.
    """
    row = np.asarray(row, dtype=np.float64)
    if gallery_ids is not None and len(gallery_ids) != row.shape[0]:
        raise ValueError("gallery_ids length does not match the score row")
    return np.argsort(-row, kind="stable")
