import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from privsynth import data as dataio
from privsynth.data import (
    DatasetError,
    DatasetFormatError,
    LabeledDataset,
    ToyWorldSpec,
    load_embeddings,
    make_toy_world,
)


def _ds(rng, n=7, d=3):
    return LabeledDataset(rng.normal(size=(n, d)), rng.integers(0, 2, n), rng.integers(0, 4, n), "validation", 2, 4)


def test_binary_roundtrip(tmp_path, rng):
    ds = _ds(rng)
    dataio.save(tmp_path / "x.bin", ds)
    assert dataio.load(tmp_path / "x.bin").equals(ds)
    bare = LabeledDataset(rng.normal(size=(3, 2)))
    assert dataio.from_bytes(dataio.to_bytes(bare)).equals(bare)
    empty = LabeledDataset(np.zeros((0, 4)))
    assert len(dataio.from_bytes(dataio.to_bytes(empty))) == 0


@settings(max_examples=30, deadline=None)
@given(n=st.integers(0, 20), d=st.integers(1, 5), seed=st.integers(0, 99))
def test_binary_roundtrip_property(n, d, seed):
    rng = np.random.default_rng(seed)
    ds = LabeledDataset(rng.normal(size=(n, d)), rng.integers(0, 3, n), None, "test", 3)
    assert dataio.from_bytes(dataio.to_bytes(ds)).equals(ds)


def test_binary_corruption_detected(rng):
    raw = dataio.to_bytes(_ds(rng))
    with pytest.raises(DatasetFormatError, match="truncated"):
        dataio.from_bytes(raw[:-1])
    with pytest.raises(DatasetFormatError, match="oversized"):
        dataio.from_bytes(raw + b"\0")
    with pytest.raises(DatasetFormatError):
        dataio.from_bytes(b"NOPE" + raw[4:])
    bad_version = raw[:4] + (99).to_bytes(2, "little") + raw[6:]
    with pytest.raises(DatasetFormatError, match="version"):
        dataio.from_bytes(bad_version)


def test_csv_roundtrip(tmp_path, rng):
    ds = _ds(rng)
    dataio.save_csv(tmp_path / "x.csv", ds)
    back = dataio.load_csv(tmp_path / "x.csv", "validation", 2, 4)
    assert back.equals(ds)
    (tmp_path / "bad.csv").write_text("f0,label\nabc,1\n")
    with pytest.raises(DatasetFormatError):
        dataio.load_csv(tmp_path / "bad.csv")


def test_validation():
    with pytest.raises(DatasetError):
        LabeledDataset(np.array([[np.nan]]))
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((2, 1)), np.array([0, 5]), n_classes=2)
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((2, 1)), np.array([0]))
    with pytest.raises(DatasetError):
        LabeledDataset(np.zeros((2, 1)), split="holdout")


def test_toy_world_is_deterministic_and_exact():
    spec = ToyWorldSpec(n_semantics=5, public_n=103, sensitive_n=50, overlap=(1, 3), weights=(0.7, 0.3))
    a, b = make_toy_world(4, spec), make_toy_world(4, spec)
    assert a.public.equals(b.public)
    assert a.sensitive_train.equals(b.sensitive_train)
    assert not make_toy_world(5, spec).public.equals(a.public)
    assert np.bincount(a.public.semantic_labels).tolist() == [21, 21, 21, 20, 20]
    assert sum(len(a.sensitive[s]) for s in dataio.SPLITS) == 50
    tr = a.sensitive_train
    assert np.bincount(tr.labels).tolist() == [28, 12]
    assert set(tr.semantic_labels.tolist()) == {1, 3}
    np.testing.assert_array_equal(tr.semantic_labels, np.array([1, 3])[tr.labels])
    assert a.public.labels is None


def test_toy_spec_validation():
    with pytest.raises(DatasetError):
        ToyWorldSpec(overlap=(0, 0))
    with pytest.raises(DatasetError):
        ToyWorldSpec(n_semantics=3, overlap=(5,))
    with pytest.raises(DatasetError):
        ToyWorldSpec(overlap=(0, 1), weights=(0.5, 0.6))


def test_toy_names_have_embeddings():
    table = load_embeddings()
    names = ToyWorldSpec(n_semantics=20).names()
    assert len(set(names)) == 20
    assert all(n in table for n in names)
    assert ToyWorldSpec(n_semantics=25).names()[0] == "sem0"


def test_embeddings_unit_and_roundtrip(tmp_path):
    table = load_embeddings()
    for v in table.vectors.values():
        assert np.linalg.norm(v) == pytest.approx(1.0)
    # related names sit closer than unrelated ones
    assert table["horse"] @ table["zebra"] > table["horse"] @ table["ship"]
    dataio.save_embeddings(tmp_path / "e.csv", table)
    back = load_embeddings(tmp_path / "e.csv")
    for k in table.vectors:
        np.testing.assert_allclose(back[k], table[k], rtol=1e-15)
    with pytest.raises(KeyError):
        table["unicorn"]
