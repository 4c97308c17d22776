"""Embedding index, exact top-k cosine search, and retrieval metrics.

One index may hold embeddings from any mix of exit depths — the unified
space makes them directly comparable — so rows carry provenance (the exit
layer that produced them) purely as bookkeeping.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from icar.errors import ContractError, DimensionError, UndefinedMetricError

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class EmbeddingIndex:
    ids: np.ndarray  # (N,) unique instance ids
    matrix: np.ndarray  # (N, e) unit rows
    categories: np.ndarray  # (N,) category id per row
    provenance: np.ndarray  # (N,) exit depth that produced each row

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class RetrievalResult:
    query_id: int
    ids: tuple  # ranked candidate ids, best first
    scores: tuple  # matching cosines, nonincreasing


def build_index(embeddings, ids, categories=None, provenance=None) -> EmbeddingIndex:
    """Validate and freeze an index; rows must be unit-norm within 1e-6."""
    matrix = np.array(embeddings, dtype=np.float64)
    if matrix.ndim != 2 or matrix.shape[0] == 0:
        raise ContractError(f"need a nonempty (N,e) matrix, got {matrix.shape}")
    n = matrix.shape[0]
    norms = np.linalg.norm(matrix, axis=1)
    worst = int(np.argmax(np.abs(norms - 1.0)))
    if abs(norms[worst] - 1.0) > NORM_TOLERANCE:
        raise ContractError(
            f"row {worst} has norm {norms[worst]:.9f}, expected 1 ± {NORM_TOLERANCE}"
        )
    ids = np.array(ids, dtype=np.int64)
    if ids.shape != (n,):
        raise DimensionError(f"ids shape {ids.shape} does not match {n} rows")
    uniq, counts = np.unique(ids, return_counts=True)
    if (counts > 1).any():
        raise ContractError(f"duplicate id {uniq[counts > 1][0]} in index")
    categories = (np.zeros(n, dtype=np.int64) if categories is None
                  else np.array(categories, dtype=np.int64))
    provenance = (np.zeros(n, dtype=np.int64) if provenance is None
                  else np.array(provenance, dtype=np.int64))
    if categories.shape != (n,) or provenance.shape != (n,):
        raise DimensionError(
            f"categories {categories.shape} / provenance {provenance.shape} "
            f"do not match {n} rows"
        )
    for arr in (matrix, ids, categories, provenance):
        arr.setflags(write=False)
    return EmbeddingIndex(ids=ids, matrix=matrix, categories=categories,
                          provenance=provenance)


def search_topk(index: EmbeddingIndex, query, k: int,
                query_id: int = -1) -> RetrievalResult:
    """Exact top-k by cosine; ties broken by ascending id."""
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.matrix.shape[1],):
        raise DimensionError(
            f"query shape {q.shape} does not match index dim "
            f"{index.matrix.shape[1]}"
        )
    scores = index.matrix @ q
    order = np.lexsort((index.ids, -scores))[:k]
    return RetrievalResult(
        query_id=query_id,
        ids=tuple(int(i) for i in index.ids[order]),
        scores=tuple(float(s) for s in scores[order]),
    )


def recall_at_k(results, ground_truth: dict, k: int) -> float:
    """100 x fraction of queries whose true instance appears in the top k."""
    by_query = {r.query_id: r for r in results}
    hits = 0
    for qid, true_id in ground_truth.items():
        if qid not in by_query:
            raise ContractError(f"query {qid} missing from results")
        hits += true_id in by_query[qid].ids[:k]
    if not ground_truth:
        raise UndefinedMetricError("recall over an empty query set")
    return 100.0 * hits / len(ground_truth)


def average_precision_at_k(ranked_ids, relevant: set, k: int) -> float:
    """AP@k with normalizer min(k, |relevant|): perfect ranking scores 1."""
    if not relevant:
        raise UndefinedMetricError("empty relevance set")
    hits, total = 0, 0.0
    for i, cand in enumerate(ranked_ids[:k], start=1):
        if cand in relevant:
            hits += 1
            total += hits / i
    return total / min(k, len(relevant))


def map_at_k(results, relevance: dict, k: int) -> float:
    """Mean AP@k over queries, x100; relevance maps query id -> id set."""
    by_query = {r.query_id: r for r in results}
    aps = []
    for qid, relevant in relevance.items():
        if qid not in by_query:
            raise ContractError(f"query {qid} missing from results")
        if not relevant:
            raise UndefinedMetricError(f"query {qid} has an empty relevance set")
        aps.append(average_precision_at_k(by_query[qid].ids, relevant, k))
    if not aps:
        raise UndefinedMetricError("mAP over an empty query set")
    return 100.0 * float(np.mean(aps))


def rsum_retention(variant_scores, baseline_scores) -> float:
    """100 x (sum of variant scores) / (sum of baseline scores)."""
    variant = np.asarray(variant_scores, dtype=np.float64)
    baseline = np.asarray(baseline_scores, dtype=np.float64)
    if variant.shape != baseline.shape or variant.ndim != 1:
        raise ContractError(
            f"score lists must match: {variant.shape} vs {baseline.shape}"
        )
    total = baseline.sum()
    if total <= 0:
        raise UndefinedMetricError(f"baseline sum must be > 0, got {total}")
    return 100.0 * float(variant.sum() / total)
