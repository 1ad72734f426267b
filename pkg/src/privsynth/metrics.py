"""Semantic distribution similarity, Fréchet distance and downstream accuracy."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import nncore
from .data import EmbeddingTable, LabeledDataset


class MetricError(ValueError):
    pass


def sds(
    weights1: Sequence[float],
    semantics1: Sequence[str],
    weights2: Sequence[float],
    semantics2: Sequence[str],
    table: EmbeddingTable,
    normalize: bool = True,
) -> float:
    """Frequency-weighted sum of pairwise cosine similarities between two semantic sets.

    Weights are relative frequencies; with ``normalize`` each side is rescaled
    to sum to one, which keeps the score in [-1, 1].
    """
    w1 = np.asarray(weights1, dtype=np.float64)
    w2 = np.asarray(weights2, dtype=np.float64)
    if w1.size == 0 or w2.size == 0:
        raise MetricError("both sides need at least one semantic")
    if w1.shape != (len(semantics1),) or w2.shape != (len(semantics2),):
        raise MetricError("one weight per semantic")
    if np.any(w1 < 0) or np.any(w2 < 0):
        raise MetricError("weights must be nonnegative")
    if normalize:
        t1, t2 = math.fsum(w1), math.fsum(w2)
        if t1 == 0 or t2 == 0:
            raise MetricError("weights sum to zero")
        w1, w2 = w1 / t1, w2 / t2
    # correctly rounded sums make the score exactly symmetric and order invariant
    V1 = [table[s] for s in semantics1]
    V2 = [table[s] for s in semantics2]
    n1 = [math.sqrt(math.fsum(v * v)) for v in V1]
    n2 = [math.sqrt(math.fsum(v * v)) for v in V2]
    terms = [
        (w1[i] * w2[j]) * (math.fsum(V1[i] * V2[j]) / (n1[i] * n2[j]))
        for i in range(len(V1))
        for j in range(len(V2))
    ]
    return math.fsum(terms)


def semantic_frequencies(semantic_labels: np.ndarray, names: Sequence[str]) -> tuple[np.ndarray, list[str]]:
    """Relative frequencies of the semantics present in a labelled dataset."""
    counts = np.bincount(np.asarray(semantic_labels, dtype=np.int64), minlength=len(names))
    present = np.flatnonzero(counts)
    return counts[present] / counts.sum(), [names[i] for i in present]


@dataclass(frozen=True, eq=False)
class GaussianFit:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise MetricError("covariance shape does not match the mean")
        if not np.allclose(cov, cov.T, rtol=0, atol=1e-10):
            raise MetricError("covariance is not symmetric")
        cov = 0.5 * (cov + cov.T)
        w = np.linalg.eigvalsh(cov) if cov.size else np.zeros(0)
        if w.size and w.min() < -1e-10 * max(1.0, float(np.abs(w).max())):
            raise MetricError(f"covariance has eigenvalue {w.min():.3g} < 0")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)


def fit_gaussian(data) -> GaussianFit:
    """Sample mean and biased (1/n) covariance."""
    X = data.features if isinstance(data, LabeledDataset) else np.asarray(data, dtype=np.float64)
    X = np.atleast_2d(X)
    if X.shape[0] < 2:
        raise MetricError("need at least two rows")
    mu = X.mean(axis=0)
    D = X - mu
    cov = D.T @ D / X.shape[0]
    return GaussianFit(mu, 0.5 * (cov + cov.T))


def _psd_sqrt(A: np.ndarray) -> np.ndarray:
    w, U = np.linalg.eigh(0.5 * (A + A.T))
    return (U * np.sqrt(np.clip(w, 0.0, None))) @ U.T


def frechet_distance(a: GaussianFit, b: GaussianFit) -> float:
    """``|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))``, clamped at zero.

    The trace of ``(S_a S_b)^(1/2)`` is taken from the symmetric matrix
    ``S_a^(1/2) S_b S_a^(1/2)``, which has the same eigenvalues.
    """
    if a.mean.shape != b.mean.shape:
        raise MetricError("dimension mismatch")
    ra = _psd_sqrt(a.cov)
    M = ra @ b.cov @ ra
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    tr_sqrt = float(np.sqrt(np.clip(w, 0.0, None)).sum())
    diff = a.mean - b.mean
    d = float(diff @ diff) + float(np.trace(a.cov) + np.trace(b.cov)) - 2.0 * tr_sqrt
    return max(d, 0.0)


def frechet_between(x, y) -> float:
    return frechet_distance(fit_gaussian(x), fit_gaussian(y))


def classification_accuracy(
    synthetic: LabeledDataset,
    sensitive_test: LabeledDataset,
    model: str = "linear",
    epochs: int = 300,
    lr: float = 0.5,
    hidden: int = 32,
    seed: int = 0,
) -> float:
    """Train on synthetic rows only, report top-1 accuracy on the sensitive test split."""
    if model not in ("linear", "mlp"):
        raise MetricError(f"unknown classifier {model!r}")
    if len(synthetic) == 0 or len(sensitive_test) == 0:
        raise MetricError("both datasets must be nonempty")
    if synthetic.labels is None or sensitive_test.labels is None:
        raise MetricError("both datasets need category labels")
    if synthetic.n_classes != sensitive_test.n_classes or synthetic.dim != sensitive_test.dim:
        raise MetricError("label space or feature dimension mismatch")
    k = int(synthetic.n_classes)
    mean = synthetic.features.mean(axis=0)
    scale = synthetic.features.std(axis=0)
    scale[scale == 0] = 1.0
    X = (synthetic.features - mean) / scale
    y = synthetic.labels
    rng = np.random.default_rng(seed)
    if model == "linear":
        net = nncore.init_dense([X.shape[1], k], ["identity"], rng)
    else:
        net = nncore.init_dense([X.shape[1], hidden, k], ["tanh", "identity"], rng)
    batch = nncore.Batch(X, y)
    for _ in range(epochs):
        net = nncore.sgd_step(net, nncore.batch_grad(net, batch, "cross_entropy"), lr)
    logits = nncore.forward(net, (sensitive_test.features - mean) / scale)
    pred = np.argmax(logits, axis=1)
    return float(np.mean(pred == sensitive_test.labels))
