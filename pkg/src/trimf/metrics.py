"""Ranking metrics: per-label and macro AUROC / AUPRC.

AUROC is the rank statistic P(score+ > score-) + 0.5 P(=), computed from
tie-averaged ranks. AUPRC is average precision: the mean of precision taken
at each positive's rank in descending-score order, with ties broken by
stable input order. Labels with a single class are undefined and excluded
from macro means with a logged warning.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import ModalityMask, active_pairs, forward_batch
from .tensor import no_grad

log = logging.getLogger(__name__)


class UndefinedMetricError(ValueError):
    """The metric is undefined for single-class label vectors."""


def _as_arrays(scores, labels):
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError(f"scores {s.shape} and labels {y.shape} must be matching vectors")
    return s, y


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their group's average rank."""
    order = np.argsort(values, kind="mergesort")
    ranks = np.empty(len(values))
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties half."""
    s, y = _as_arrays(scores, labels)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise UndefinedMetricError(f"AUROC undefined with {pos} positives / {neg} negatives")
    ranks = _average_ranks(s)
    u = ranks[y].sum() - pos * (pos + 1) / 2.0
    return u / (pos * neg)


def auroc_pairwise(scores, labels) -> float:
    """Quadratic oracle: count concordant pairs directly."""
    s, y = _as_arrays(scores, labels)
    pos_scores = s[y]
    neg_scores = s[~y]
    if len(pos_scores) == 0 or len(neg_scores) == 0:
        raise UndefinedMetricError("AUROC undefined for single-class labels")
    wins = (pos_scores[:, None] > neg_scores[None, :]).sum()
    ties = (pos_scores[:, None] == neg_scores[None, :]).sum()
    return (wins + 0.5 * ties) / (len(pos_scores) * len(neg_scores))


def auprc(scores, labels) -> float:
    """Average precision over the descending-score ordering (stable on ties)."""
    s, y = _as_arrays(scores, labels)
    pos = int(y.sum())
    if pos == 0:
        raise UndefinedMetricError("AUPRC undefined without positives")
    order = np.argsort(-s, kind="mergesort")
    hits = y[order]
    ranks = np.arange(1, len(s) + 1)
    cum_hits = np.cumsum(hits)
    precision_at_hits = cum_hits[hits] / ranks[hits]
    return float(precision_at_hits.sum() / pos)


@dataclass
class EvalReport:
    """Per-label and macro metrics for one evaluation pass."""

    auroc: list  # per label; None where undefined
    auprc: list
    macro_auroc: float
    macro_auprc: float
    sample_count: int
    positive_counts: list
    active_pairs: tuple[str, ...] = ()
    skipped_labels: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        return {
            "auroc": self.auroc,
            "auprc": self.auprc,
            "macro_auroc": self.macro_auroc,
            "macro_auprc": self.macro_auprc,
            "sample_count": self.sample_count,
            "positive_counts": self.positive_counts,
            "active_pairs": list(self.active_pairs),
            "skipped_labels": list(self.skipped_labels),
        }


def score_report(scores: np.ndarray, labels: np.ndarray, active_pairs=()) -> EvalReport:
    """Assemble a report from per-sample scores; macro over two-class labels."""
    labels = np.asarray(labels, dtype=bool)
    k = labels.shape[1]
    per_auroc: list = [None] * k
    per_auprc: list = [None] * k
    skipped = []
    for j in range(k):
        y = labels[:, j]
        if 0 < y.sum() < len(y):
            per_auroc[j] = auroc(scores[:, j], y)
            per_auprc[j] = auprc(scores[:, j], y)
        else:
            skipped.append(j)
            log.warning("label %d has a single class in this split; excluded from macro", j)
    defined_roc = [v for v in per_auroc if v is not None]
    defined_prc = [v for v in per_auprc if v is not None]
    return EvalReport(
        auroc=per_auroc,
        auprc=per_auprc,
        macro_auroc=float(np.mean(defined_roc)) if defined_roc else float("nan"),
        macro_auprc=float(np.mean(defined_prc)) if defined_prc else float("nan"),
        sample_count=int(labels.shape[0]),
        positive_counts=[int(c) for c in labels.sum(axis=0)],
        active_pairs=tuple(active_pairs),
        skipped_labels=tuple(skipped),
    )


def model_scores(params, dataset, mask: ModalityMask | None = None, batch_size: int = 64) -> np.ndarray:
    """Sigmoid scores of the fusion model over a dataset view, in sample order."""
    mask = mask or dataset.uniform_mask()
    n = len(dataset)
    if n == 0:
        raise ValueError("cannot evaluate an empty split")
    chunks = []
    with no_grad():
        for start in range(0, n, batch_size):
            idx = np.arange(start, min(start + batch_size, n))
            out = forward_batch(params, dataset.batch(idx), mask)
            chunks.append(T.sigmoid(out.logits).data)
    return np.vstack(chunks)


def evaluate(params, dataset, mask: ModalityMask | None = None, batch_size: int = 64) -> EvalReport:
    """Forward the split under the mask and report ranking metrics."""
    mask = mask or dataset.uniform_mask()
    scores = model_scores(params, dataset, mask, batch_size=batch_size)
    return score_report(scores, dataset.labels, active_pairs=active_pairs(params, mask))
