"""Training objectives: multi-label BCE, the fusion-vector contrastive term,
and their weighted combination.

The contrastive term is a per-sample SUM of squared differences over the
fusion dimension (``frcl_mean`` divides by the dimension instead); batch
reduction is always the mean over samples so the loss weights stay
batch-size independent. BCE is computed in logit form via softplus, so large
logits cannot overflow.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError
from .tensor import ContractError, Tensor


@dataclass(frozen=True)
class LossWeights:
    """Weights of the classification term and the three pairwise contrastive terms."""

    lambda1: float = 1.0
    lambda2: float = 3.0
    lambda3: float = 3.0
    lambda4: float = 3.0

    def __post_init__(self):
        if self.lambda1 <= 0:
            raise ConfigError("lambda1 must be positive: classification always contributes")
        for name in ("lambda2", "lambda3", "lambda4"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")

    def classification_only(self) -> "LossWeights":
        return LossWeights(self.lambda1, 0.0, 0.0, 0.0)


def bce_multilabel(logits: Tensor, labels) -> Tensor:
    """Mean stable binary cross-entropy over labels (and samples if batched).

    ``softplus(x) - x*y`` equals ``-log sigmoid(x)`` for y=1 and
    ``-log(1 - sigmoid(x))`` for y=0.
    """
    y = np.asarray(labels, dtype=float)
    if y.shape != logits.shape:
        raise T.ShapeError(f"labels shape {y.shape} does not match logits {logits.shape}")
    per_label = T.sub(T.softplus(logits), T.mul(logits, Tensor(y)))
    return T.tensor_mean(per_label)


def frcl(f1: Tensor, f2: Tensor, mean: bool = False) -> Tensor:
    """Squared-difference contrast between two fusion vectors.

    Vectors ``[N]`` give the sum over N (``mean=True`` divides by N); batches
    ``[B, N]`` reduce each row the same way, then average over the batch.
    """
    if f1.shape != f2.shape:
        raise T.ShapeError(f"frcl inputs must match, got {f1.shape} vs {f2.shape}")
    diff = T.sub(f1, f2)
    sq = T.mul(diff, diff)
    reduce_row = T.tensor_mean if mean else T.tensor_sum
    if sq.ndim == 1:
        return reduce_row(sq)
    return T.tensor_mean(reduce_row(sq, axis=-1))


def combined_loss(out, labels, weights: LossWeights, frcl_mean: bool = False) -> Tensor:
    """Weighted sum of classification BCE and the three pairwise contrasts.

    Training on complete modalities is assumed: ``out.bimf`` must carry all
    three pair vectors (in canonical pair order image+text, image+tabular,
    text+tabular).
    """
    vectors = list(out.bimf.values())
    if len(vectors) != 3:
        raise ContractError(
            f"combined loss needs all three pair vectors, got {len(out.bimf)}; "
            "train pair-only models with classification loss alone"
        )
    f_it, f_is, f_ts = vectors
    total = T.mul(bce_multilabel(out.logits, labels), weights.lambda1)
    if weights.lambda2:
        total = total + T.mul(frcl(f_it, f_is, mean=frcl_mean), weights.lambda2)
    if weights.lambda3:
        total = total + T.mul(frcl(f_it, f_ts, mean=frcl_mean), weights.lambda3)
    if weights.lambda4:
        total = total + T.mul(frcl(f_is, f_ts, mean=frcl_mean), weights.lambda4)
    return total
