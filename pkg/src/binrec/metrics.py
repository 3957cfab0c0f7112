"""Top-K ranking metrics and the evaluation harness.

Conventions, fixed across the package: binary relevance; recall divides by
the full relevant count; average precision divides by ``min(K, |relevant|)``;
NDCG uses gains 1 at relevant ranks with ``1 / log2(rank + 1)`` discounts
and an ideal DCG truncated at ``min(K, |relevant|)``.  Candidate items for
a user are all items minus that user's training positives.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binindex import PackedCodes, select_topk
from .binindex import topk as binary_topk
from .data import SplitDataset
from .errors import DataError, ShapeError


def _hits(ranked, relevant, k: int) -> np.ndarray:
    ranked = np.asarray(ranked, dtype=np.int64)[:k]
    return np.isin(ranked, np.asarray(list(relevant), dtype=np.int64))


def recall_at_k(ranked, relevant, k: int) -> float:
    """Fraction of the relevant set retrieved in the first ``k`` positions."""
    if len(relevant) == 0:
        raise DataError("recall_at_k: empty relevant set")
    return float(_hits(ranked, relevant, k).sum() / len(relevant))


def map_at_k(ranked, relevant, k: int) -> float:
    """Average precision at ``k``, normalized by ``min(k, |relevant|)``."""
    if len(relevant) == 0:
        raise DataError("map_at_k: empty relevant set")
    hits = _hits(ranked, relevant, k)
    if not hits.any():
        return 0.0
    ranks = np.flatnonzero(hits) + 1
    precisions = np.cumsum(hits)[hits.astype(bool)] / ranks
    return float(precisions.sum() / min(k, len(relevant)))


def ndcg_at_k(ranked, relevant, k: int) -> float:
    """Discounted cumulative gain at ``k`` against the ideal ordering."""
    if len(relevant) == 0:
        raise DataError("ndcg_at_k: empty relevant set")
    hits = _hits(ranked, relevant, k)
    discounts = 1.0 / np.log2(np.arange(1, len(hits) + 1) + 1.0)
    dcg = float((hits * discounts).sum())
    ideal = 1.0 / np.log2(np.arange(1, min(k, len(relevant)) + 1) + 1.0)
    return dcg / float(ideal.sum())


# ---------------------------------------------------------------------------
# scorers
# ---------------------------------------------------------------------------


class BinaryScorer:
    """Ranks items by packed-code inner products."""

    def __init__(self, user_codes: PackedCodes, item_codes: PackedCodes):
        if user_codes.dim != item_codes.dim:
            raise ShapeError(
                f"BinaryScorer: user codes have d={user_codes.dim} but item codes d={item_codes.dim}"
            )
        self.user_codes = user_codes
        self.item_codes = item_codes

    @property
    def num_users(self) -> int:
        return self.user_codes.rows

    def topk(self, user: int, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
        ranked = binary_topk(self.user_codes.words[user], self.item_codes, k, exclude)
        return ranked.indices


class EmbeddingScorer:
    """Ranks items by real-valued embedding dot products."""

    def __init__(self, user_factors: np.ndarray, item_factors: np.ndarray):
        if user_factors.shape[1] != item_factors.shape[1]:
            raise ShapeError(
                f"EmbeddingScorer: user factors have {user_factors.shape[1]} columns "
                f"but item factors {item_factors.shape[1]}"
            )
        self.user_factors = user_factors
        self.item_factors = item_factors

    @property
    def num_users(self) -> int:
        return self.user_factors.shape[0]

    def topk(self, user: int, k: int, exclude: np.ndarray | None = None) -> np.ndarray:
        scores = self.item_factors @ self.user_factors[user]
        return select_topk(scores, k, exclude)


# ---------------------------------------------------------------------------
# harness
# ---------------------------------------------------------------------------


@dataclass
class EvalReport:
    k: int
    recall: float
    map: float
    ndcg: float
    users_evaluated: int
    users_skipped: int

    def as_dict(self) -> dict:
        return {
            "K": self.k,
            "recall": self.recall,
            "map": self.map,
            "ndcg": self.ndcg,
            "users_evaluated": self.users_evaluated,
            "users_skipped": self.users_skipped,
        }


def evaluate(scorer, split: SplitDataset, k: int) -> EvalReport:
    """Average the three metrics over all users with held-out positives.

    Training positives are excluded from each user's candidate set; users
    with empty test sets are skipped and only counted.
    """
    graph = split.train
    if scorer.num_users != graph.num_users:
        raise ShapeError(
            f"evaluate: scorer covers {scorer.num_users} users but the split has {graph.num_users}"
        )
    totals = np.zeros(3)
    evaluated = skipped = 0
    for u in range(graph.num_users):
        relevant = split.test_positives[u]
        if len(relevant) == 0:
            skipped += 1
            continue
        ranked = scorer.topk(u, k, exclude=graph.positives_mask(u))
        totals += (
            recall_at_k(ranked, relevant, k),
            map_at_k(ranked, relevant, k),
            ndcg_at_k(ranked, relevant, k),
        )
        evaluated += 1
    if evaluated == 0:
        raise DataError("evaluate: no user has held-out positives")
    means = totals / evaluated
    return EvalReport(
        k=k,
        recall=float(means[0]),
        map=float(means[1]),
        ndcg=float(means[2]),
        users_evaluated=evaluated,
        users_skipped=skipped,
    )


CSV_COLUMNS = ("dataset", "model", "seed", "K", "recall", "map", "ndcg")


def append_csv_row(path: Path | str, dataset: str, model: str, seed: int, report: EvalReport) -> None:
    """Append one result row, writing the header when the file is new."""
    path = Path(path)
    fresh = not path.exists() or path.stat().st_size == 0
    with path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_COLUMNS)
        writer.writerow(
            [dataset, model, seed, report.k, repr(report.recall), repr(report.map), repr(report.ndcg)]
        )
