"""Leave-one-out retrieval over page embeddings: cosine ranking, average
precision, mAP and Top-1."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .aggregation import PageEmbedding
from .errors import ValidationError


@dataclass(frozen=True)
class RankedList:
    """Full gallery ranking for one query, most similar first."""

    query: str
    gallery: tuple[str, ...]
    scores: tuple[float, ...]

    def __post_init__(self) -> None:
        if len(self.gallery) != len(self.scores):
            raise ValidationError("gallery and scores must be parallel")
        if any(a < b for a, b in zip(self.scores, self.scores[1:])):
            raise ValidationError("scores must be non-increasing")


@dataclass(frozen=True)
class RetrievalReport:
    """Aggregate metrics plus per-query detail rows.

    Queries whose gallery holds no same-writer page are excluded from map
    and top1 and surface in isolated_queries; score_isolated_as_zero folds
    them in as AP 0 instead.
    """

    map: float
    top1: float
    per_query_ap: dict[str, float]
    per_query_top1: dict[str, bool]
    first_relevant_rank: dict[str, int]
    isolated_queries: tuple[str, ...]
    query_count: int


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Plain cosine; rejects zero vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValidationError("cosine similarity is undefined for zero vectors")
    return float(a @ b) / (na * nb)


def rank_all(pages: list[PageEmbedding]) -> list[RankedList]:
    """Each page queries all the others; exhaustive cosine ranking with
    ties broken by ascending page_id."""
    if len(pages) < 2:
        raise ValidationError("ranking needs at least 2 pages")
    ids = [p.page_id for p in pages]
    if len(set(ids)) != len(ids):
        raise ValidationError("duplicate page_id in the collection")
    vectors = np.array([p.vector for p in pages], dtype=np.float64)
    norms = np.linalg.norm(vectors, axis=1)
    if np.any(norms == 0.0):
        raise ValidationError("zero embedding cannot be ranked")
    unit = vectors / norms[:, None]
    sims = unit @ unit.T
    ranked = []
    for q in range(len(pages)):
        gallery = [j for j in range(len(pages)) if j != q]
        # Sort key: descending similarity, then ascending page_id.
        order = sorted(gallery, key=lambda j: (-sims[q, j], ids[j]))
        ranked.append(
            RankedList(
                query=ids[q],
                gallery=tuple(ids[j] for j in order),
                scores=tuple(float(sims[q, j]) for j in order),
            )
        )
    return ranked


def average_precision(relevance: list[bool]) -> float:
    """AP down a ranked relevance list: mean of hits_so_far/position over
    the relevant positions. Returns 0.0 when nothing is relevant."""
    hits = 0
    total = 0.0
    for position, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / position
    return total / hits if hits else 0.0


def evaluate(
    ranked: list[RankedList],
    writers: dict[str, str],
    score_isolated_as_zero: bool = False,
) -> RetrievalReport:
    """Score ranked lists against writer identities."""
    per_ap: dict[str, float] = {}
    per_top1: dict[str, bool] = {}
    first_rank: dict[str, int] = {}
    isolated: list[str] = []
    for rl in ranked:
        if rl.query not in writers:
            raise ValidationError(f"page {rl.query} has no writer identity")
        for page in rl.gallery:
            if page not in writers:
                raise ValidationError(f"page {page} has no writer identity")
        relevance = [writers[p] == writers[rl.query] for p in rl.gallery]
        if not any(relevance):
            isolated.append(rl.query)
            if not score_isolated_as_zero:
                continue
        per_ap[rl.query] = average_precision(relevance)
        per_top1[rl.query] = bool(relevance[0])
        first_rank[rl.query] = relevance.index(True) + 1 if any(relevance) else 0
    scored = list(per_ap)
    map_value = float(np.mean([per_ap[q] for q in scored])) if scored else 0.0
    top1_value = float(np.mean([per_top1[q] for q in scored])) if scored else 0.0
    return RetrievalReport(
        map=map_value,
        top1=top1_value,
        per_query_ap=per_ap,
        per_query_top1=per_top1,
        first_relevant_rank=first_rank,
        isolated_queries=tuple(isolated),
        query_count=len(ranked),
    )


def report_to_json(report: RetrievalReport) -> dict:
    """JSON-ready summary; per-query metrics keyed by page id."""
    return {
        "map": report.map,
        "top1": report.top1,
        "query_count": report.query_count,
        "isolated_queries": list(report.isolated_queries),
        "per_query": {
            q: {
                "ap": report.per_query_ap[q],
                "top1_hit": report.per_query_top1[q],
                "first_relevant_rank": report.first_relevant_rank[q],
            }
            for q in sorted(report.per_query_ap)
        },
    }


def report_to_csv(report: RetrievalReport) -> str:
    """Per-query rows: query, ap, top1_hit, first_relevant_rank."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["query", "ap", "top1_hit", "first_relevant_rank"])
    for q in sorted(report.per_query_ap):
        writer.writerow(
            [
                q,
                repr(report.per_query_ap[q]),
                int(report.per_query_top1[q]),
                report.first_relevant_rank[q],
            ]
        )
    return buf.getvalue()


def report_dumps(report: RetrievalReport) -> str:
    return json.dumps(report_to_json(report), indent=2, sort_keys=True)
