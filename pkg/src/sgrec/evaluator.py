"""Leave-last-out ranking evaluation: HR@K and nDCG@K over the full catalogue."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .engine import Tensor
from .model import SGRecModel, collate
from .seq2graph import augment_for_training

logger = logging.getLogger(__name__)

DEFAULT_KS = (1, 5, 10, 20)


@dataclass
class RankedResult:
    seq_id: int
    truth: int
    rank: int
    top: list = field(default_factory=list)


def rank_of(scores: np.ndarray, truth: int) -> int:
    """1-based rank of ``truth``; ties go to the lower POI index."""
    s = scores[truth]
    ahead = np.count_nonzero(scores > s) + np.count_nonzero(scores[:truth] == s)
    return int(ahead) + 1


def rank_pois(scores, truth: int, k: int = 20, seq_id: int = 0) -> RankedResult:
    scores = scores.data if isinstance(scores, Tensor) else np.asarray(scores)
    order = np.argsort(-scores, kind="stable")[:k]
    return RankedResult(seq_id, int(truth), rank_of(scores, truth), [int(i) for i in order])


def hit_ratio_at_k(results: Sequence[RankedResult], k: int) -> float:
    if k < 1:
        raise ValueError("K must be at least 1")
    if not results:
        return 0.0
    return sum(r.rank <= k for r in results) / len(results)


def ndcg_at_k(results: Sequence[RankedResult], k: int) -> float:
    """Single relevant item, so the ideal DCG is 1."""
    if k < 1:
        raise ValueError("K must be at least 1")
    if not results:
        return 0.0
    return sum(1.0 / math.log2(r.rank + 1) for r in results if r.rank <= k) / len(results)


@dataclass
class EvalReport:
    split: str
    metrics: dict
    n_sequences: int
    cat_accuracy: float
    results: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {
            "split": self.split,
            "metrics": {str(k): v for k, v in self.metrics.items()},
            "n_sequences": self.n_sequences,
            "cat_accuracy": self.cat_accuracy,
        }

    def hr(self, k: int) -> float:
        return self.metrics[k]["hr"]

    def ndcg(self, k: int) -> float:
        return self.metrics[k]["ndcg"]

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_ranks_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["seq_id", "truth", "rank"])
            for r in self.results:
                w.writerow([r.seq_id, r.truth, r.rank])


def score_sequences(model: SGRecModel, sequences, vocab, batch_size: int = 256):
    """Forward every sequence without augmentation; yields ``(start, probs_poi, probs_cat)``."""
    for start in range(0, len(sequences), batch_size):
        chunk = sequences[start : start + batch_size]
        augs = [augment_for_training(s, vocab, None, 0.0, None) for s in chunk]
        trace = model.forward(collate(augs, vocab.poi_cat), with_category=True)
        yield start, trace.probs_poi.data, trace.probs_cat.data


def evaluate_split(
    model: SGRecModel,
    sequences,
    vocab,
    ks: Sequence[int] = DEFAULT_KS,
    split: str = "test",
    batch_size: int = 256,
) -> EvalReport:
    """Hide the final check-in of each sequence and rank it against every POI.

    No neighbour sampling happens here: the graph is built from the sequence's
    own transitions and self-loops only.
    """
    ks = sorted({int(k) for k in ks})
    usable = []
    for i, s in enumerate(sequences):
        if len(s) < 2:
            logger.warning("skipping sequence %d with fewer than two check-ins", i)
            continue
        usable.append((i, s))
    results, cat_hits = [], 0
    seqs = [s for _, s in usable]
    top_k = max(ks) if ks else 20
    for start, probs_poi, probs_cat in score_sequences(model, seqs, vocab, batch_size):
        for j in range(probs_poi.shape[0]):
            seq_id, seq = usable[start + j]
            results.append(rank_pois(probs_poi[j], seq.pois[-1], top_k, seq_id))
            cat_hits += int(np.argmax(probs_cat[j]) == seq.cats[-1])
    metrics = {k: {"hr": hit_ratio_at_k(results, k), "ndcg": ndcg_at_k(results, k)} for k in ks}
    return EvalReport(
        split=split,
        metrics=metrics,
        n_sequences=len(results),
        cat_accuracy=cat_hits / len(results) if results else 0.0,
        results=results,
    )
