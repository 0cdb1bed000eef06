"""Evaluation metrics: top-1 accuracy, recall@1, and retrieval mAP."""

from __future__ import annotations

import numpy as np

METRIC_NAMES = ("top1_accuracy", "recall_at_1", "mAP")


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    preds = np.asarray(logits).argmax(axis=1)
    return float((preds == np.asarray(labels)).mean())


def _pairwise_sq_dists(emb: np.ndarray) -> np.ndarray:
    sq = (emb * emb).sum(axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * (emb @ emb.T)
    return np.maximum(d2, 0.0)


def recall_at_1(embeddings: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> float:
    """Fraction of queries whose nearest other embedding (L2) shares the
    query's label. Exact distance ties are broken uniformly at random with
    the supplied generator, so results are reproducible given its seed."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(emb)
    if n < 2:
        raise ValueError("recall_at_1 needs at least 2 samples")
    d2 = _pairwise_sq_dists(emb)
    np.fill_diagonal(d2, np.inf)
    hits = 0
    for i in range(n):
        row = d2[i]
        best = row.min()
        ties = np.flatnonzero(row == best)
        j = ties[0] if len(ties) == 1 else int(rng.choice(ties))
        hits += int(labels[j] == labels[i])
    return hits / n


def mean_average_precision(embeddings: np.ndarray, labels: np.ndarray) -> float:
    """Standard ranked-retrieval mAP with each sample as a query against the
    remaining gallery. Distance ties rank by lower index (stable sort)."""
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = np.asarray(labels)
    n = len(emb)
    if n < 2:
        raise ValueError("mean_average_precision needs at least 2 samples")
    d2 = _pairwise_sq_dists(emb)
    np.fill_diagonal(d2, np.inf)
    aps = []
    for i in range(n):
        order = np.argsort(d2[i], kind="stable")[: n - 1]
        rel = labels[order] == labels[i]
        total = int(rel.sum())
        if total == 0:
            continue
        cum = np.cumsum(rel)
        precision_at_hit = cum[rel] / (np.flatnonzero(rel) + 1)
        aps.append(precision_at_hit.sum() / total)
    if not aps:
        raise ValueError("no query has a relevant gallery item")
    return float(np.mean(aps))
