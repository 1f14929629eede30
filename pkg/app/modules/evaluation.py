"""
TriDomain Retrieval Evaluation
Cross-domain retrieval metrics, distance statistics, signal-level
robustness tables and report rendering
"""

import io
import logging
import math
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np
import orjson
import pandas as pd
from pydantic import ValidationError

from app.config import settings
from app.exceptions import DataValidationError
from app.modules.summarization import SIGNAL_BUCKETS, signal_bucket
from app.schemas import (
    DistanceStats,
    DomainId,
    EmbeddingRecord,
    EvalReport,
    SignalBucketRow,
    SummaryRecord,
    TaskId,
    TaskMetrics,
)
from app.services.tensor_io import describe_validation_error
from app.services.vector_search import rank_gallery, similarity_matrix, stack_vectors

logger = logging.getLogger(__name__)

RECALL_CUTOFFS = (1, 5, 10)
NDCG_CUTOFF = 10
HISTOGRAM_BIN_WIDTH = 0.02
HISTOGRAM_RANGE = (0.0, 2.0)
DEFAULT_SIGNAL_TASK = TaskId.L2P


# =============================================================================
# Per-query Metrics
# =============================================================================

def _check_relevant(relevant: Set[int]) -> None:
    if not relevant:
        raise ValueError("query has no relevant gallery item")


def recall_at_k(ranking: Sequence[int], relevant: Set[int], k: int) -> int:
    """1 if any relevant item is within the top min(k, G) positions"""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    _check_relevant(relevant)
    return int(any(int(g) in relevant for g in ranking[:k]))


def mrr(ranking: Sequence[int], relevant: Set[int]) -> float:
    """Reciprocal of the 1-based rank of the first relevant item"""
    _check_relevant(relevant)
    for position, g in enumerate(ranking, start=1):
        if int(g) in relevant:
            return 1.0 / position
    return 0.0


def ndcg_at_10(ranking: Sequence[int], relevant: Set[int]) -> float:
    """Binary-gain NDCG with the log2(i + 1) discount, cutoff 10"""
    _check_relevant(relevant)
    dcg = math.fsum(
        1.0 / math.log2(i + 2) for i, g in enumerate(ranking[:NDCG_CUTOFF]) if int(g) in relevant
    )
    ideal = math.fsum(1.0 / math.log2(i + 2) for i in range(min(len(relevant), NDCG_CUTOFF)))
    return dcg / ideal


# =============================================================================
# Task Evaluation
# =============================================================================

def evaluate_task(
    queries: Sequence[EmbeddingRecord],
    gallery: Sequence[EmbeddingRecord],
    block_size: Optional[int] = None
) -> Tuple[TaskMetrics, Dict[str, bool]]:
    """
    Retrieval metrics for one query/gallery pair of domains

    Relevance is product-level and binary: every gallery item sharing the
    query's product_id is relevant. Queries without a relevant item are
    excluded and counted.

    Returns:
        (TaskMetrics, {query instance_id: hit at rank 1})
    """
    sims = similarity_matrix(queries, gallery, block_size)
    by_product: Dict[str, Set[int]] = {}
    for g, pid in enumerate(sims.gallery_products):
        by_product.setdefault(pid, set()).add(g)

    recalls = {k: [] for k in RECALL_CUTOFFS}
    reciprocal: List[float] = []
    ndcg: List[float] = []
    hits: Dict[str, bool] = {}
    excluded = 0
    for q, pid in enumerate(sims.query_products):
        relevant = by_product.get(pid)
        if not relevant:
            excluded += 1
            continue
        ranking = rank_gallery(sims.scores[q])
        for k in RECALL_CUTOFFS:
            recalls[k].append(recall_at_k(ranking, relevant, k))
        reciprocal.append(mrr(ranking, relevant))
        ndcg.append(ndcg_at_10(ranking, relevant))
        hits[sims.query_ids[q]] = bool(recalls[1][-1])

    if excluded:
        logger.warning(f"{excluded} queries have no relevant gallery item and are excluded")

    def mean(values: Sequence[float]) -> float:
        return math.fsum(values) / len(values) if values else 0.0

    metrics = TaskMetrics(
        r1=100.0 * mean(recalls[1]),
        r5=100.0 * mean(recalls[5]),
        r10=100.0 * mean(recalls[10]),
        mrr=mean(reciprocal),
        ndcg10=mean(ndcg),
        n_queries=len(reciprocal),
        n_excluded=excluded,
    )
    return metrics, hits


def group_by_domain(records: Iterable[EmbeddingRecord]) -> Dict[DomainId, List[EmbeddingRecord]]:
    grouped: Dict[DomainId, List[EmbeddingRecord]] = {}
    for record in records:
        grouped.setdefault(record.domain, []).append(record)
    return grouped


def evaluate_all(
    embeddings: Sequence[EmbeddingRecord],
    tasks: Optional[Sequence[TaskId]] = None,
    summaries: Optional[Mapping[str, SummaryRecord]] = None,
    block_size: Optional[int] = None,
    pair_cap: Optional[int] = None,
    seed: Optional[int] = None
) -> EvalReport:
    """
    Run the cross-domain tasks and assemble the report

    Args:
        embeddings: Embedding records of every evaluated domain
        tasks: Tasks to run (default: all six); tasks with a missing domain are skipped
        summaries: Query summaries keyed by instance_id, enabling signal tables
        block_size: Similarity block size
        pair_cap: Inter-product distance pair cap
        seed: Distance sampling seed

    Returns:
        EvalReport
    """
    grouped = group_by_domain(embeddings)
    results: Dict[TaskId, TaskMetrics] = {}
    signal_tables: Dict[TaskId, List[SignalBucketRow]] = {}

    for task in tasks or list(TaskId):
        task = TaskId(task)
        queries = grouped.get(task.query_domain)
        gallery = grouped.get(task.gallery_domain)
        if not queries or not gallery:
            logger.warning(f"Skipping {task.value}: domain not embedded")
            continue
        metrics, hits = evaluate_task(queries, gallery, block_size)
        results[task] = metrics
        logger.info(f"{task.value}: R1={metrics.r1:.2f} R5={metrics.r5:.2f} R10={metrics.r10:.2f}")

        if summaries is not None and task.query_domain.has_asr:
            covered = [qid for qid in hits if qid in summaries]
            if len(covered) < len(hits):
                logger.warning(f"{task.value}: {len(hits) - len(covered)} queries lack a summary")
            if covered:
                signal_tables[task] = signal_report([summaries[q] for q in covered],
                                                    [hits[q] for q in covered])

    if not results:
        raise ValueError("no task could be evaluated")

    count = len(results)
    stats = distance_stats(embeddings, pair_cap, seed) if len({r.product_id for r in embeddings}) >= 2 else None
    report = EvalReport(
        tasks=results,
        mean_r1=math.fsum(m.r1 for m in results.values()) / count,
        mean_mrr=math.fsum(m.mrr for m in results.values()) / count,
        mean_ndcg10=math.fsum(m.ndcg10 for m in results.values()) / count,
        distance_stats=stats,
        signal_tables=signal_tables,
    )
    logger.info(f"✓ Evaluation complete: {count} tasks, mR1={report.mean_r1:.2f}")
    return report


# =============================================================================
# Distance Statistics
# =============================================================================

def _histogram(distances: np.ndarray) -> np.ndarray:
    bins = int(round((HISTOGRAM_RANGE[1] - HISTOGRAM_RANGE[0]) / HISTOGRAM_BIN_WIDTH))
    counts, _ = np.histogram(distances, bins=bins, range=HISTOGRAM_RANGE)
    return counts


def distance_stats(
    records: Sequence[EmbeddingRecord],
    pair_cap: Optional[int] = None,
    seed: Optional[int] = None
) -> DistanceStats:
    """
    Intra- and inter-product cosine distance summary

    Distance = 1 - cosine similarity, clipped to [0, 2]. Intra pairs are all
    instance pairs sharing a product_id. Inter pairs are enumerated exactly
    while their count is within pair_cap, otherwise pair_cap pairs are drawn
    uniformly with the given seed.
    """
    pair_cap = settings.distance_pair_cap if pair_cap is None else pair_cap
    seed = settings.distance_seed if seed is None else seed
    products = np.array([r.product_id for r in records])
    if len(set(products.tolist())) < 2:
        raise ValueError("distance statistics need at least two products")

    x = stack_vectors(records)
    n = x.shape[0]
    bins = int(round((HISTOGRAM_RANGE[1] - HISTOGRAM_RANGE[0]) / HISTOGRAM_BIN_WIDTH))
    intra_hist = np.zeros(bins, dtype=np.int64)
    inter_hist = np.zeros(bins, dtype=np.int64)
    intra_sum = inter_sum = 0.0
    intra_pairs = inter_pairs = 0

    _, counts = np.unique(products, return_counts=True)
    singletons = int((counts == 1).sum())
    total_intra = int((counts * (counts - 1) // 2).sum())
    total_inter = n * (n - 1) // 2 - total_intra
    sampled = total_inter > pair_cap

    for i in range(n - 1):
        d = np.clip(1.0 - x[i + 1:] @ x[i], *HISTOGRAM_RANGE)
        same = products[i + 1:] == products[i]
        intra = d[same]
        intra_hist += _histogram(intra)
        intra_sum += float(intra.sum())
        intra_pairs += intra.size
        if not sampled:
            inter = d[~same]
            inter_hist += _histogram(inter)
            inter_sum += float(inter.sum())
            inter_pairs += inter.size

    if sampled:
        rng = np.random.default_rng(seed)
        chunks: List[np.ndarray] = []
        drawn = 0
        while drawn < pair_cap:
            size = 2 * (pair_cap - drawn)
            a = rng.integers(n, size=size)
            b = rng.integers(n, size=size)
            keep = products[a] != products[b]
            d = np.clip(1.0 - np.einsum("ij,ij->i", x[a[keep]], x[b[keep]]), *HISTOGRAM_RANGE)
            d = d[:pair_cap - drawn]
            chunks.append(d)
            drawn += d.size
        inter = np.concatenate(chunks)
        inter_hist = _histogram(inter)
        inter_sum = float(inter.sum())
        inter_pairs = inter.size
        logger.info(f"Inter-product distances sampled: {inter_pairs} of {total_inter} pairs")

    if singletons:
        logger.info(f"{singletons} products have a single instance and no intra pairs")

    return DistanceStats(
        intra_mean=intra_sum / intra_pairs if intra_pairs else None,
        inter_mean=inter_sum / inter_pairs if inter_pairs else None,
        intra_pairs=intra_pairs,
        inter_pairs=inter_pairs,
        inter_sampled=sampled,
        singleton_products=singletons,
        bin_width=HISTOGRAM_BIN_WIDTH,
        intra_histogram=intra_hist.tolist(),
        inter_histogram=inter_hist.tolist(),
    )


# =============================================================================
# Signal-level Robustness
# =============================================================================

def signal_report(summaries: Sequence[SummaryRecord], hits: Sequence[bool]) -> List[SignalBucketRow]:
    """
    Group queries by the signal level of their summary

    Args:
        summaries: Summary of each query
        hits: Whether each query was retrieved at rank 1

    Returns:
        One row per bucket in table order; empty buckets have r1 None
    """
    if len(summaries) != len(hits):
        raise ValueError("summaries and hits must align")
    if not summaries:
        raise ValueError("signal report needs at least one query")

    grouped: Dict[str, List[bool]] = {label: [] for label in SIGNAL_BUCKETS}
    for summary, hit in zip(summaries, hits):
        grouped[signal_bucket(summary.signal_level)].append(bool(hit))

    total = len(summaries)
    return [
        SignalBucketRow(
            bucket=label,
            count=len(members),
            percentage=100.0 * len(members) / total,
            r1=100.0 * sum(members) / len(members) if members else None,
        )
        for label, members in grouped.items()
    ]


# =============================================================================
# Report I/O and Rendering
# =============================================================================

REPORT_FORMATS = ("json", "text", "csv")


def save_report(report: EvalReport, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(render_report(report, "json").encode("utf-8"))
    return path


def load_report(path: Union[str, Path]) -> EvalReport:
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"report not found: {path}", path=str(path))
    try:
        return EvalReport.model_validate(orjson.loads(path.read_bytes()))
    except orjson.JSONDecodeError as e:
        raise DataValidationError(f"malformed report: {path}", path=str(path)) from e
    except ValidationError as e:
        raise DataValidationError(f"invalid report {path}: {describe_validation_error(e)}",
                                  path=str(path)) from e


def metrics_frame(report: EvalReport) -> pd.DataFrame:
    """Per-task metric table"""
    rows = [
        {"task": task.value, "R1": m.r1, "R5": m.r5, "R10": m.r10, "MRR": m.mrr,
         "NDCG10": m.ndcg10, "queries": m.n_queries, "excluded": m.n_excluded}
        for task, m in sorted(report.tasks.items(), key=lambda item: list(TaskId).index(item[0]))
    ]
    return pd.DataFrame(rows, columns=["task", "R1", "R5", "R10", "MRR", "NDCG10", "queries", "excluded"])


def histogram_frame(stats: DistanceStats) -> pd.DataFrame:
    """Distance histograms for external plotting"""
    bins = len(stats.intra_histogram) or len(stats.inter_histogram)
    starts = [round(i * stats.bin_width, 10) for i in range(bins)]
    return pd.DataFrame({
        "bin_start": starts,
        "bin_end": [round(s + stats.bin_width, 10) for s in starts],
        "intra": stats.intra_histogram or [0] * bins,
        "inter": stats.inter_histogram or [0] * bins,
    })


def _render_text(report: EvalReport, signal_task: Optional[TaskId]) -> str:
    lines = [f"{'Task':<6}{'R1':>8}{'R5':>8}{'R10':>8}{'MRR':>8}{'NDCG10':>8}{'Queries':>9}{'Excl':>6}"]
    for _, row in metrics_frame(report).iterrows():
        lines.append(f"{row['task']:<6}{row['R1']:>8.2f}{row['R5']:>8.2f}{row['R10']:>8.2f}"
                     f"{row['MRR']:>8.3f}{row['NDCG10']:>8.3f}{row['queries']:>9d}{row['excluded']:>6d}")
    lines.append(f"{'mR1':<6}{report.mean_r1:>8.2f}   MRR {report.mean_mrr:.3f}   "
                 f"NDCG10 {report.mean_ndcg10:.3f}")

    stats = report.distance_stats
    if stats is not None:
        intra = f"{stats.intra_mean:.4f}" if stats.intra_mean is not None else "n/a"
        inter = f"{stats.inter_mean:.4f}" if stats.inter_mean is not None else "n/a"
        sampled = " (sampled)" if stats.inter_sampled else ""
        lines += ["", f"Intra-product distance  {intra}  ({stats.intra_pairs} pairs)",
                  f"Inter-product distance  {inter}  ({stats.inter_pairs} pairs{sampled})"]

    task = signal_task or DEFAULT_SIGNAL_TASK
    table = report.signal_tables.get(task)
    if table:
        lines += ["", f"Signal level ({task.value})", f"{'Bucket':<20}{'Queries %':>10}{'R1':>8}"]
        for row in table:
            r1 = f"{row.r1:.2f}" if row.r1 is not None else "n/a"
            lines.append(f"{row.bucket:<20}{row.percentage:>10.2f}{r1:>8}")
    return "\n".join(lines) + "\n"


def render_report(report: EvalReport, fmt: str = "json", signal_task: Optional[TaskId] = None) -> str:
    """
    Render a report as json (machine), text (aligned columns) or csv (per-task table)
    """
    if fmt == "json":
        payload = report.model_dump(mode="json")
        return orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS).decode("utf-8") + "\n"
    if fmt == "text":
        return _render_text(report, signal_task)
    if fmt == "csv":
        buffer = io.StringIO()
        metrics_frame(report).to_csv(buffer, index=False)
        return buffer.getvalue()
    raise ValueError(f"unknown report format: {fmt}")
