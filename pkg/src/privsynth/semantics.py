"""Semantic query function, semantic-distribution release and public-data selection."""

from __future__ import annotations

import csv
import io
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import nncore
from .accountant import BudgetLedger
from .data import LabeledDataset
from .dpcore import NoiseSource, perturb_histogram


class SemanticsError(ValueError):
    pass


class EmptySelectionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SemanticVocabulary:
    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise SemanticsError("vocabulary must be nonempty")
        if len(set(self.names)) != len(self.names):
            raise SemanticsError("vocabulary names must be unique")
        object.__setattr__(self, "index", {n: i for i, n in enumerate(self.names)})

    def __len__(self):
        return len(self.names)


@dataclass(eq=False)
class SemanticDistribution:
    counts: np.ndarray
    k1: int
    noisy: bool = False
    released: bool = field(default=False, repr=False)

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.float64).reshape(-1)

    @property
    def total(self) -> float:
        return float(self.counts.sum())


@dataclass(frozen=True)
class SemanticDescription:
    selected: frozenset[int]
    per_category: dict[int, frozenset[int]] | None = None


@dataclass(frozen=True)
class SqfConfig:
    hidden: int = 32
    epochs: int = 200
    lr: float = 0.5
    batch_size: int | None = None  # None: full batch
    seed: int = 0


@dataclass
class SqfModel:
    """Classifier plus the input standardisation fitted on the public data."""

    net: nncore.DenseNet
    mean: np.ndarray
    scale: np.ndarray
    loss_history: list[float] = field(default_factory=list)

    def probabilities(self, X: np.ndarray) -> np.ndarray:
        logits = nncore.forward(self.net, (np.atleast_2d(X) - self.mean) / self.scale)
        z = logits - logits.max(axis=1, keepdims=True)
        p = np.exp(z)
        return p / p.sum(axis=1, keepdims=True)


def train_sqf(public: LabeledDataset, vocab: SemanticVocabulary, cfg: SqfConfig = SqfConfig()) -> SqfModel:
    """Fit the semantic query function with cross-entropy on public labels only.

    Plain gradient descent; with the default full batch the recorded training
    loss is monotone for small enough ``lr``.
    """
    if len(public) == 0:
        raise SemanticsError("cannot train on an empty dataset")
    y = public.semantic_labels
    if y is None:
        raise SemanticsError("public data carries no semantic labels")
    if y.max() >= len(vocab):
        raise SemanticsError("semantic label outside the vocabulary")
    rng = np.random.default_rng(cfg.seed)
    mean = public.features.mean(axis=0)
    scale = public.features.std(axis=0)
    scale[scale == 0] = 1.0
    X = (public.features - mean) / scale
    ns = len(vocab)
    if cfg.hidden:
        net = nncore.init_dense([public.dim, cfg.hidden, ns], ["tanh", "identity"], rng)
    else:
        net = nncore.init_dense([public.dim, ns], ["identity"], rng)
    history = []
    n = len(public)
    for _ in range(cfg.epochs):
        if cfg.batch_size is None or cfg.batch_size >= n:
            batches = [np.arange(n)]
        else:
            perm = rng.permutation(n)
            batches = [perm[i : i + cfg.batch_size] for i in range(0, n, cfg.batch_size)]
        for idx in batches:
            g = nncore.batch_grad(net, nncore.Batch(X[idx], y[idx]), "cross_entropy")
            net = nncore.sgd_step(net, g, cfg.lr)
        history.append(float(nncore.per_example_losses(net, nncore.Batch(X, y), "cross_entropy").mean()))
    return SqfModel(net, mean, scale, history)


def topk_indices(scores: np.ndarray, k: int) -> np.ndarray:
    """Indices of the ``k`` largest scores per row; ties go to the lower index."""
    scores = np.atleast_2d(scores)
    if not 1 <= k <= scores.shape[1]:
        raise SemanticsError(f"k={k} outside [1, {scores.shape[1]}]")
    order = np.argsort(-scores, axis=1, kind="stable")
    return order[:, :k]


def query_topk(Q, x: np.ndarray, k1: int) -> np.ndarray:
    """Top-``k1`` semantics of one record (1-D input) or of every row of a matrix.

    ``Q`` is an :class:`SqfModel` or any callable mapping features to
    probabilities.
    """
    x = np.asarray(x, dtype=np.float64)
    probs = Q.probabilities(x) if hasattr(Q, "probabilities") else np.atleast_2d(Q(x))
    out = topk_indices(probs, k1)
    return out[0] if x.ndim == 1 else out


def _n_semantics(Q) -> int:
    if hasattr(Q, "net"):
        return Q.net.out_dim
    return int(Q.n_semantics)


def build_distribution(Q, sensitive: LabeledDataset, k1: int, n_semantics: int | None = None) -> SemanticDistribution:
    """Count the queried top-``k1`` semantics over every sensitive record."""
    ns = n_semantics if n_semantics is not None else _n_semantics(Q)
    if not 1 <= k1 <= ns:
        raise SemanticsError(f"k1={k1} outside [1, {ns}]")
    counts = np.zeros(ns)
    if len(sensitive):
        top = query_topk(Q, sensitive.features, k1)
        counts += np.bincount(top.ravel(), minlength=ns)
    return SemanticDistribution(counts, k1)


def release_distribution(
    sd: SemanticDistribution,
    sigma2: float,
    noise: NoiseSource | None,
    ledger: BudgetLedger | None = None,
    test_mode: bool = False,
    charge: bool = True,
) -> SemanticDistribution:
    """Gaussian release of a raw distribution. A raw distribution can be released once."""
    if sd.noisy:
        raise SemanticsError("distribution is already a noisy release")
    if sd.released:
        raise SemanticsError("this raw distribution has already been released")
    noisy = perturb_histogram(sd.counts, sd.k1, sigma2, noise, allow_zero=test_mode)
    if charge and ledger is not None and sigma2 > 0:
        ledger.charge_gaussian_query(sigma2)
    sd.released = True
    return SemanticDistribution(noisy, sd.k1, noisy=True)


def select_description(sd: SemanticDistribution, k2: int, test_mode: bool = False) -> SemanticDescription:
    """Top-``k2`` semantics of a released distribution.

    Pure post-processing of the noisy counts; negative counts are kept.
    """
    if not sd.noisy and not test_mode:
        raise SemanticsError("selection from raw counts outside test mode leaks the sensitive data")
    idx = topk_indices(sd.counts, k2)[0]
    return SemanticDescription(frozenset(int(i) for i in idx))


def select_pretraining_data(public: LabeledDataset, desc: SemanticDescription) -> LabeledDataset:
    """Public rows whose semantic label falls in the description.

    With a per-category description each kept row is relabelled with the
    lowest-index sensitive category whose description admits it.
    """
    sem = public.semantic_labels
    if sem is None:
        raise SemanticsError("public data carries no semantic labels")
    if desc.per_category is None:
        keep = np.isin(sem, sorted(desc.selected))
        out = public.subset(np.flatnonzero(keep))
    else:
        cats = sorted(desc.per_category)
        label = np.full(len(public), -1, dtype=np.int64)
        for c in reversed(cats):
            label[np.isin(sem, sorted(desc.per_category[c]))] = c
        idx = np.flatnonzero(label >= 0)
        n_classes = max(cats) + 1 if cats else 0
        out = LabeledDataset(
            public.features[idx], label[idx], sem[idx], public.split, n_classes, public.n_semantics
        )
    if len(out) == 0:
        warnings.warn("semantic description selected no public records", EmptySelectionWarning, stacklevel=2)
    return out


def conditional_distributions(
    Q,
    sensitive: LabeledDataset,
    k1: int,
    partition: Mapping[int, Sequence[int]] | None = None,
    n_semantics: int | None = None,
) -> dict[int, SemanticDistribution]:
    """One raw distribution per sensitive category.

    ``partition`` maps category to row indices and defaults to grouping by
    ``sensitive.labels``; overlapping index sets are rejected.
    """
    if partition is None:
        if sensitive.labels is None:
            raise SemanticsError("sensitive data has no category labels to partition by")
        n_cat = sensitive.n_classes or 0
        partition = {c: np.flatnonzero(sensitive.labels == c) for c in range(n_cat)}
    seen: set[int] = set()
    for idx in partition.values():
        rows = {int(i) for i in idx}
        if seen & rows:
            raise SemanticsError("partition subsets overlap")
        seen |= rows
    return {
        c: build_distribution(Q, sensitive.subset(np.asarray(idx, dtype=np.int64)), k1, n_semantics)
        for c, idx in partition.items()
    }


def release_conditional(
    sds: Mapping[int, SemanticDistribution],
    sigma2: float,
    noise: NoiseSource | None,
    ledger: BudgetLedger | None = None,
    test_mode: bool = False,
) -> dict[int, SemanticDistribution]:
    """Release every category's distribution with ``sigma2``; the ledger is charged once.

    Each sensitive record contributes to exactly one category, so the joint
    release has the same sensitivity as a single histogram.
    """
    out = {}
    for c in sorted(sds):
        out[c] = release_distribution(sds[c], sigma2, noise, ledger=None, test_mode=test_mode)
    if ledger is not None and sigma2 > 0:
        ledger.charge_gaussian_query(sigma2)
    return out


def select_conditional(sds: Mapping[int, SemanticDistribution], k2: int, test_mode: bool = False) -> SemanticDescription:
    per = {c: select_description(sd, k2, test_mode).selected for c, sd in sds.items()}
    union = frozenset().union(*per.values()) if per else frozenset()
    return SemanticDescription(union, per)


def write_sd_table(path, sd: SemanticDistribution, vocab: SemanticVocabulary) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "name", "noisy_count"])
        for i, (name, v) in enumerate(zip(vocab.names, sd.counts)):
            w.writerow([i, name, repr(float(v))])


def read_sd_table(path, k1: int) -> tuple[SemanticDistribution, SemanticVocabulary]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows.sort(key=lambda r: int(r["index"]))
    vocab = SemanticVocabulary(tuple(r["name"] for r in rows))
    sd = SemanticDistribution(np.array([float(r["noisy_count"]) for r in rows]), k1, noisy=True)
    return sd, vocab


_SQF_MAGIC = b"PSQF"


def save_sqf(path, Q: SqfModel) -> None:
    """``PSQF``, u32 input width, f64 mean and scale, then the network checkpoint."""
    buf = io.BytesIO()
    buf.write(_SQF_MAGIC)
    buf.write(struct.pack("<I", Q.mean.size))
    buf.write(Q.mean.astype("<f8").tobytes())
    buf.write(Q.scale.astype("<f8").tobytes())
    nncore.write_net(buf, Q.net)
    Path(path).write_bytes(buf.getvalue())


def load_sqf(path) -> SqfModel:
    fh = io.BytesIO(Path(path).read_bytes())
    if fh.read(4) != _SQF_MAGIC:
        raise SemanticsError("not a semantic query function checkpoint")
    head = fh.read(4)
    if len(head) != 4:
        raise SemanticsError("truncated checkpoint")
    (d,) = struct.unpack("<I", head)
    raw = fh.read(16 * d)
    if len(raw) != 16 * d:
        raise SemanticsError("truncated checkpoint")
    v = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    return SqfModel(nncore.read_net(fh), v[:d], v[d:])
