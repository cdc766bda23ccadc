"""
Recall@K and NDCG@K with a single relevant item per prediction.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import Sequence

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from pydantic import BaseModel

from sanmove.src.errors import DataError
from sanmove.src.logger_download import logger
from sanmove.src.predictor import Recommender, SequenceExample

DEFAULT_KS = (1, 5, 10)


def rank_candidates(scores: ArrayLike) -> NDArray[np.int64]:
    """Location indices by descending score; equal scores in ascending index order."""
    scores = np.nan_to_num(np.asarray(scores, dtype=np.float64), nan=-np.inf)
    return np.lexsort((np.arange(scores.shape[0]), -scores))


def target_rank(scores: ArrayLike, target: int) -> int:
    """1-based position of `target` in `rank_candidates(scores)`."""
    scores = np.nan_to_num(np.asarray(scores, dtype=np.float64), nan=-np.inf)
    s = scores[target]
    ahead = np.count_nonzero(scores > s) + np.count_nonzero(scores[:target] == s)
    return int(ahead) + 1


def recall_at_k(ranked: Sequence[int], target: int, k: int) -> int:
    return int(target in list(ranked[:k]))


def ndcg_at_k(ranked: Sequence[int], target: int, k: int) -> float:
    top = list(ranked[:k])
    if target not in top:
        return 0.0
    return 1.0 / math.log2(top.index(target) + 2)


class Metrics(BaseModel):
    recall_at: dict[int, float]
    ndcg_at: dict[int, float]
    n_examples: int

    def to_frame(self, model: str = "sanmove", mode: str = "full") -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "model": model,
                    "mode": mode,
                    "K": k,
                    "recall": self.recall_at[k],
                    "ndcg": self.ndcg_at[k],
                    "n": self.n_examples,
                }
                for k in sorted(self.recall_at)
            ]
        )


def metrics_from_scores(
    scores: NDArray[np.float64], targets: ArrayLike, ks: Sequence[int] = DEFAULT_KS
) -> Metrics:
    """
    Metrics from a score matrix [n x N+1] and the true next locations.

    Raises
    ------
    DataError
        If there is no prediction to score.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise DataError("nothing to evaluate: the test set is empty")
    ranks = np.array([target_rank(row, t) for row, t in zip(scores, targets)])
    recall = {k: float(np.mean(ranks <= k)) for k in ks}
    ndcg = {k: float(np.mean(np.where(ranks <= k, 1.0 / np.log2(ranks + 1), 0.0))) for k in ks}
    return Metrics(recall_at=recall, ndcg_at=ndcg, n_examples=int(targets.size))


def collect_scores(
    model: Recommender, examples: Sequence[SequenceExample], workers: int = 1
) -> tuple[NDArray[np.float64], NDArray[np.int64]]:
    """
    Final-position scores for every example whose target is a known location,
    in example order, with the matching targets.
    """
    kept = [ex for ex in examples if ex.locations[-1] != 0]
    if len(kept) < len(examples):
        logger.info(f"[Eval] Skipped {len(examples) - len(kept)} examples with an unknown target")
    if not kept:
        return np.zeros((0, 0)), np.zeros(0, dtype=np.int64)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(model.full_sort_predict, kept))
    else:
        rows = [model.full_sort_predict(ex) for ex in kept]
    return np.stack(rows), np.array([ex.locations[-1] for ex in kept], dtype=np.int64)


def evaluate(
    model: Recommender,
    examples: Sequence[SequenceExample],
    ks: Sequence[int] = DEFAULT_KS,
    workers: int = 1,
) -> Metrics:
    scores, targets = collect_scores(model, examples, workers)
    metrics = metrics_from_scores(scores, targets, ks)
    logger.info(
        f"[Eval] {metrics.n_examples} predictions, "
        + ", ".join(f"Rec@{k} {metrics.recall_at[k]:.4f}" for k in ks)
    )
    return metrics
