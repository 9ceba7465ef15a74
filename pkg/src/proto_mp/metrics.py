"""Classification accuracy, homophily-segmented accuracy and ranking metrics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import SEGMENTS, Graph, node_homophily, segment_by_homophily


def accuracy(predictions, labels, mask=None) -> float:
    pred = np.asarray(predictions)
    labels = np.asarray(labels)
    mask = np.ones(len(labels), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("accuracy: empty mask")
    return float(np.mean(pred[mask] == labels[mask]))


@dataclass(frozen=True)
class SegmentReport:
    counts: dict[str, int]
    accuracies: dict[str, float]  # only segments with at least one node
    overall: float
    evaluated: int
    excluded_isolated: int = 0

    def weighted_overall(self) -> float:
        tot = sum(self.counts[s] for s in self.accuracies)
        return sum(self.accuracies[s] * self.counts[s] for s in self.accuracies) / tot


def segment_accuracy(predictions, g: Graph, mask) -> SegmentReport:
    """Accuracy per homophily segment over the masked nodes.

    Masked nodes without out-neighbours have no homophily ratio; they are
    left out of both the segments and the overall figure (and counted in
    ``excluded_isolated``) so the segments always partition the evaluated set.
    """
    pred = np.asarray(predictions)
    mask = np.asarray(mask, dtype=bool)
    ratios = node_homophily(g).ratios
    has_ratio = ~np.isnan(ratios)
    use = mask & has_ratio
    counts = {s: 0 for s in SEGMENTS}
    accs = {}
    if use.any():
        seg = segment_by_homophily(ratios[use])
        correct = pred[use] == g.labels[use]
        for s in SEGMENTS:
            sel = seg == s
            counts[s] = int(sel.sum())
            if counts[s]:
                accs[s] = float(np.mean(correct[sel]))
        overall = float(np.mean(correct))
    else:
        overall = float("nan")
    return SegmentReport(counts, accs, overall, int(use.sum()), int((mask & ~has_ratio).sum()))


def _ranks(ranked_lists, ground_truth) -> np.ndarray:
    if len(ranked_lists) == 0:
        raise ValueError("ranking metrics need at least one query")
    if len(ranked_lists) != len(ground_truth):
        raise ValueError("ranked_lists and ground_truth differ in length")
    ranks = []
    for items, truth in zip(ranked_lists, ground_truth):
        items = list(items)
        ranks.append(items.index(truth) + 1 if truth in items else np.inf)
    return np.asarray(ranks, dtype=np.float64)


def rank_by_score(scores) -> list[list[int]]:
    """Item indices per query sorted by descending score, ties by ascending index."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    return [list(np.lexsort((np.arange(len(row)), -row))) for row in scores]


def hits_at_k(ranked_lists, ground_truth, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    return float(np.mean(_ranks(ranked_lists, ground_truth) <= k))


def mrr_at_k(ranked_lists, ground_truth, k: int) -> float:
    if k < 1:
        raise ValueError("k must be >= 1")
    r = _ranks(ranked_lists, ground_truth)
    return float(np.mean(np.where(r <= k, 1.0 / r, 0.0)))
