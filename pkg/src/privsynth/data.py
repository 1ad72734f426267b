"""Dataset container, file formats and the synthetic toy world.

Binary dataset layout (little-endian)::

    b"PSDS"   magic
    u16       version (1)
    u64 n, u64 d
    u32       flags: bit 0 = category labels, bit 1 = semantic labels
    u32       n_classes (0 when absent)
    u32       n_semantics (0 when absent)
    u8        split code (0 train, 1 validation, 2 test)
    f64[n*d]  features, row-major
    i64[n]    category labels, if flagged
    i64[n]    semantic labels, if flagged
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

SPLITS = ("train", "validation", "test")

_MAGIC = b"PSDS"
_VERSION = 1
_HEADER = struct.Struct("<HQQIIIB")


class DatasetError(ValueError):
    pass


class DatasetFormatError(DatasetError):
    """Corrupt, truncated or unsupported dataset file."""


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray | None = None
    semantic_labels: np.ndarray | None = None
    split: str = "train"
    n_classes: int | None = None
    n_semantics: int | None = None

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim == 1:
            X = X.reshape(0, 0) if X.size == 0 else X.reshape(-1, 1)
        if X.ndim != 2:
            raise DatasetError("features must be an (n, d) matrix")
        if not np.all(np.isfinite(X)):
            raise DatasetError("features must be finite")
        object.__setattr__(self, "features", X)
        if self.split not in SPLITS:
            raise DatasetError(f"unknown split {self.split!r}")
        for name, bound in (("labels", "n_classes"), ("semantic_labels", "n_semantics")):
            v = getattr(self, name)
            if v is None:
                continue
            v = np.asarray(v, dtype=np.int64).reshape(-1)
            if v.shape[0] != X.shape[0]:
                raise DatasetError(f"{name} has {v.shape[0]} rows, features have {X.shape[0]}")
            limit = getattr(self, bound)
            if limit is None:
                limit = int(v.max()) + 1 if v.size else 0
                object.__setattr__(self, bound, limit)
            if v.size and (v.min() < 0 or v.max() >= limit):
                raise DatasetError(f"{name} outside [0, {limit})")
            object.__setattr__(self, name, v)

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return replace(
            self,
            features=self.features[idx],
            labels=None if self.labels is None else self.labels[idx],
            semantic_labels=None if self.semantic_labels is None else self.semantic_labels[idx],
        )

    def equals(self, other: "LabeledDataset") -> bool:
        """Bitwise equality of every field."""

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and a.tobytes() == b.tobytes()

        return (
            same(self.features, other.features)
            and same(self.labels, other.labels)
            and same(self.semantic_labels, other.semantic_labels)
            and self.split == other.split
            and self.n_classes == other.n_classes
            and self.n_semantics == other.n_semantics
        )


def to_bytes(ds: LabeledDataset) -> bytes:
    flags = (ds.labels is not None) | ((ds.semantic_labels is not None) << 1)
    parts = [
        _MAGIC,
        _HEADER.pack(
            _VERSION,
            len(ds),
            ds.dim,
            flags,
            ds.n_classes or 0,
            ds.n_semantics or 0,
            SPLITS.index(ds.split),
        ),
        ds.features.astype("<f8").tobytes(),
    ]
    if ds.labels is not None:
        parts.append(ds.labels.astype("<i8").tobytes())
    if ds.semantic_labels is not None:
        parts.append(ds.semantic_labels.astype("<i8").tobytes())
    return b"".join(parts)


def from_bytes(raw: bytes) -> LabeledDataset:
    if raw[:4] != _MAGIC:
        raise DatasetFormatError("bad magic bytes")
    if len(raw) < 4 + _HEADER.size:
        raise DatasetFormatError("truncated header")
    version, n, d, flags, n_classes, n_sem, split = _HEADER.unpack_from(raw, 4)
    if version != _VERSION:
        raise DatasetFormatError(f"unsupported version {version}")
    if split >= len(SPLITS) or flags > 3:
        raise DatasetFormatError("corrupt header")
    pos = 4 + _HEADER.size
    n_blocks = bin(flags).count("1")
    expected = pos + 8 * n * d + 8 * n * n_blocks
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise DatasetFormatError(f"{kind} file: {len(raw)} bytes, expected {expected}")
    X = np.frombuffer(raw, dtype="<f8", count=n * d, offset=pos).astype(np.float64).reshape(n, d)
    pos += 8 * n * d
    labels = sem = None
    if flags & 1:
        labels = np.frombuffer(raw, dtype="<i8", count=n, offset=pos).astype(np.int64)
        pos += 8 * n
    if flags & 2:
        sem = np.frombuffer(raw, dtype="<i8", count=n, offset=pos).astype(np.int64)
    try:
        return LabeledDataset(
            X,
            labels,
            sem,
            SPLITS[split],
            n_classes if flags & 1 else None,
            n_sem if flags & 2 else None,
        )
    except DatasetError as exc:
        raise DatasetFormatError(str(exc)) from exc


def save(path, ds: LabeledDataset) -> None:
    Path(path).write_bytes(to_bytes(ds))


def load(path) -> LabeledDataset:
    return from_bytes(Path(path).read_bytes())


def save_csv(path, ds: LabeledDataset) -> None:
    header = [f"f{j}" for j in range(ds.dim)]
    if ds.labels is not None:
        header.append("label")
    if ds.semantic_labels is not None:
        header.append("semantic")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[i]]
            if ds.labels is not None:
                row.append(int(ds.labels[i]))
            if ds.semantic_labels is not None:
                row.append(int(ds.semantic_labels[i]))
            w.writerow(row)


def load_csv(path, split: str = "train", n_classes=None, n_semantics=None) -> LabeledDataset:
    """Read a CSV with a header row; ``label`` and ``semantic`` columns are optional."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetFormatError("empty CSV (missing header)")
    header, body = rows[0], rows[1:]
    lab = header.index("label") if "label" in header else None
    sem = header.index("semantic") if "semantic" in header else None
    feat_cols = [i for i in range(len(header)) if i not in (lab, sem)]
    try:
        X = np.array([[float(r[i]) for i in feat_cols] for r in body], dtype=np.float64)
        labels = np.array([int(r[lab]) for r in body]) if lab is not None else None
        sems = np.array([int(r[sem]) for r in body]) if sem is not None else None
    except (ValueError, IndexError) as exc:
        raise DatasetFormatError(f"malformed CSV row: {exc}") from exc
    X = X.reshape(len(body), len(feat_cols))
    return LabeledDataset(X, labels, sems, split, n_classes, n_semantics)


# --- toy world -------------------------------------------------------------

TOY_NAMES = (
    "zebra", "bee", "tabby", "ostrich", "sorrel",
    "airliner", "sports_car", "ocean_liner", "moving_van", "tailed_frog",
    "horse", "bird", "cat", "car", "ship", "truck", "airplane", "frog", "deer", "dog",
)


@dataclass(frozen=True)
class ToyWorldSpec:
    """Gaussian-cluster public/sensitive corpora.

    Public data has ``n_semantics`` equally sized clusters. Sensitive category
    ``c`` is drawn around public cluster ``overlap[c]``, displaced by
    ``shift`` (a horse near the zebras), with mixture ``weights``.
    """

    n_semantics: int = 10
    dim: int = 16
    public_n: int = 2000
    sensitive_n: int = 500
    overlap: tuple[int, ...] = (0, 1)
    weights: tuple[float, ...] | None = None
    mean_scale: float = 6.0
    spread: float = 1.0
    sensitive_spread: float | None = None
    shift: float = 0.5
    splits: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        if self.n_semantics < 1 or self.dim < 1:
            raise DatasetError("need at least one semantic and one feature")
        if self.public_n < 0 or self.sensitive_n < 0:
            raise DatasetError("sizes must be nonnegative")
        if not self.overlap or len(set(self.overlap)) != len(self.overlap):
            raise DatasetError("overlap must be a nonempty set of cluster ids")
        if any(not 0 <= s < self.n_semantics for s in self.overlap):
            raise DatasetError("overlap ids must index public clusters")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (len(self.overlap),) or np.any(w < 0) or not np.isclose(w.sum(), 1.0):
                raise DatasetError("weights must be a distribution over the overlap clusters")
        if self.spread < 0 or (self.sensitive_spread or 0) < 0:
            raise DatasetError("spreads must be nonnegative")
        if len(self.splits) != 3 or any(s < 0 for s in self.splits) or not np.isclose(sum(self.splits), 1.0):
            raise DatasetError("splits must be three nonnegative fractions summing to 1")

    @property
    def mixture(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self.overlap), 1.0 / len(self.overlap))
        return np.asarray(self.weights, dtype=float)

    def names(self) -> tuple[str, ...]:
        if self.n_semantics <= len(TOY_NAMES):
            return TOY_NAMES[: self.n_semantics]
        return tuple(f"sem{i}" for i in range(self.n_semantics))


@dataclass(frozen=True)
class ToyWorld:
    spec: ToyWorldSpec
    public: LabeledDataset
    sensitive: dict[str, LabeledDataset]
    vocab_names: tuple[str, ...]
    public_means: np.ndarray
    sensitive_means: np.ndarray
    counts: np.ndarray = field(repr=False)

    @property
    def sensitive_train(self) -> LabeledDataset:
        return self.sensitive["train"]


def _allocate(total: int, weights: np.ndarray) -> np.ndarray:
    """Integer split of ``total`` proportional to ``weights`` (largest remainder)."""
    raw = weights * total
    out = np.floor(raw).astype(np.int64)
    rest = total - int(out.sum())
    order = np.argsort(-(raw - out), kind="stable")
    out[order[:rest]] += 1
    return out


def make_toy_world(seed: int, spec: ToyWorldSpec = ToyWorldSpec()) -> ToyWorld:
    """Deterministic public and sensitive corpora with a known semantic mixture.

    Every sensitive row carries its category label and, as ground truth, the
    public semantic it was generated from. Per-category counts in each split
    follow the mixture exactly (largest-remainder rounding), not by sampling.
    """
    rng = np.random.default_rng(np.random.SeedSequence(int(seed)))
    ns, d = spec.n_semantics, spec.dim
    means = rng.normal(0.0, spec.mean_scale / np.sqrt(d), (ns, d))
    direction = rng.normal(size=(len(spec.overlap), d))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    sens_means = means[list(spec.overlap)] + spec.shift * direction

    per_cluster = _allocate(spec.public_n, np.full(ns, 1.0 / ns))
    pub_sem = np.repeat(np.arange(ns), per_cluster)
    pub_X = means[pub_sem] + spec.spread * rng.standard_normal((spec.public_n, d))
    perm = rng.permutation(spec.public_n)
    public = LabeledDataset(pub_X[perm], None, pub_sem[perm], "train", None, ns)

    s_spread = spec.spread if spec.sensitive_spread is None else spec.sensitive_spread
    split_sizes = _allocate(spec.sensitive_n, np.asarray(spec.splits))
    sensitive, counts = {}, []
    n_cat = len(spec.overlap)
    for split, m in zip(SPLITS, split_sizes):
        per_cat = _allocate(int(m), spec.mixture)
        cats = np.repeat(np.arange(n_cat), per_cat)
        X = sens_means[cats] + s_spread * rng.standard_normal((int(m), d))
        p = rng.permutation(int(m))
        sem = np.asarray(spec.overlap, dtype=np.int64)[cats]
        sensitive[split] = LabeledDataset(X[p], cats[p], sem[p], split, n_cat, ns)
        counts.append(per_cat)
    return ToyWorld(spec, public, sensitive, spec.names(), means, sens_means, np.array(counts))


# --- embedding table -------------------------------------------------------


@dataclass(frozen=True)
class EmbeddingTable:
    vectors: dict[str, np.ndarray]

    def __post_init__(self):
        if not self.vectors:
            raise DatasetError("embedding table is empty")
        dims = {np.asarray(v).shape for v in self.vectors.values()}
        if len(dims) != 1 or len(next(iter(dims))) != 1:
            raise DatasetError("all embeddings must be vectors of one dimension")
        unit = {}
        for k, v in self.vectors.items():
            v = np.asarray(v, dtype=np.float64)
            n = np.linalg.norm(v)
            if n == 0:
                raise DatasetError(f"zero embedding for {k!r}")
            unit[k] = v / n
        object.__setattr__(self, "vectors", unit)

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.vectors[name]
        except KeyError:
            raise KeyError(f"no embedding for semantic {name!r}") from None

    def __contains__(self, name) -> bool:
        return name in self.vectors


def load_embeddings(path=None) -> EmbeddingTable:
    """Read a ``name,v1,...,vD`` CSV; defaults to the bundled 16-d toy table."""
    if path is None:
        text = resources.files("privsynth").joinpath("embeddings.csv").read_text()
    else:
        text = Path(path).read_text()
    vectors = {}
    for row in csv.reader(text.splitlines()):
        if not row or row[0].startswith("#") or row[0] == "name":
            continue
        if row[0] in vectors:
            raise DatasetError(f"duplicate embedding {row[0]!r}")
        vectors[row[0]] = np.array([float(v) for v in row[1:]])
    return EmbeddingTable(vectors)


def save_embeddings(path, table: EmbeddingTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["name"] + [f"v{i + 1}" for i in range(table.dim)])
        for k, v in table.vectors.items():
            w.writerow([k] + [repr(float(x)) for x in v])
