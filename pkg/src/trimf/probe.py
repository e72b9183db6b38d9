"""Plain logistic-regression probes over flattened embeddings.

The probes are the unimodal/concatenated baselines of the experiment suites
and the oracle used to certify generated datasets: full-batch gradient
descent with momentum on standardized features, zero-initialized, hence
deterministic. Nothing here touches the autodiff stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import special


@dataclass
class LogisticProbe:
    weights: np.ndarray  # [d, labels]
    bias: np.ndarray  # [labels]
    mean: np.ndarray
    scale: np.ndarray

    def scores(self, features: np.ndarray) -> np.ndarray:
        x = (np.asarray(features, dtype=float) - self.mean) / self.scale
        return special.expit(x @ self.weights + self.bias)


def flatten_modalities(dataset, modalities) -> np.ndarray:
    """Concatenate the chosen modalities' embeddings, one flat row per sample."""
    parts = [dataset.embeddings[m].reshape(len(dataset), -1).astype(float) for m in modalities]
    return np.hstack(parts)


def fit_logistic_probe(
    features: np.ndarray,
    labels: np.ndarray,
    l2: float = 1e-3,
    iterations: int = 300,
    lr: float = 0.5,
    momentum: float = 0.9,
) -> LogisticProbe:
    x = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=float)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale[scale < 1e-12] = 1.0
    x = (x - mean) / scale
    n, d = x.shape
    w = np.zeros((d, y.shape[1]))
    b = np.zeros(y.shape[1])
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    for _ in range(iterations):
        p = special.expit(x @ w + b)
        err = (p - y) / n
        gw = x.T @ err + l2 * w
        gb = err.sum(axis=0)
        vw = momentum * vw - lr * gw
        vb = momentum * vb - lr * gb
        w = w + vw
        b = b + vb
    return LogisticProbe(weights=w, bias=b, mean=mean, scale=scale)
