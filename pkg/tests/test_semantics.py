import warnings

import numpy as np
import pytest

from privsynth import semantics as sem
from privsynth.accountant import BudgetLedger
from privsynth.data import LabeledDataset, ToyWorldSpec, make_toy_world
from privsynth.dpcore import NoiseSource
from conftest import max_adjacent_sd_shift, zebra_bee_world


def test_worked_example_zebra_bee():
    vocab, public, horses, Q = zebra_bee_world()
    raw = sem.build_distribution(Q, horses, 1, 2)
    assert dict(zip(vocab.names, raw.counts)) == {"zebra": 3.0, "bee": 0.0}
    released = sem.release_distribution(raw, 0.0, None, test_mode=True)
    desc = sem.select_description(released, 1)
    assert {vocab.names[i] for i in desc.selected} == {"zebra"}
    chosen = sem.select_pretraining_data(public, desc)
    assert len(chosen) == 3 and set(chosen.semantic_labels.tolist()) == {0}


@pytest.mark.parametrize("k1", [1, 2, 4])
def test_histogram_sensitivity_is_sqrt_k1(k1):
    worst, shifts = max_adjacent_sd_shift(k1)
    assert worst <= np.sqrt(k1) + 1e-12
    assert worst == pytest.approx(np.sqrt(k1), abs=1e-12)


def test_topk_ties_break_to_lower_index():
    np.testing.assert_array_equal(sem.topk_indices(np.array([1.0, 3.0, 3.0, 0.0]), 2)[0], [1, 2])
    with pytest.raises(sem.SemanticsError):
        sem.topk_indices(np.ones(3), 4)


def test_query_topk_shapes():
    _, _, horses, Q = zebra_bee_world()
    assert sem.query_topk(Q, horses.features[0], 1).shape == (1,)
    assert sem.query_topk(Q, horses.features, 2).shape == (3, 2)


def test_release_once_and_charge_once():
    _, _, horses, Q = zebra_bee_world()
    raw = sem.build_distribution(Q, horses, 1, 2)
    ledger = BudgetLedger()
    noisy = sem.release_distribution(raw, 5.0, NoiseSource(0), ledger)
    assert noisy.noisy and ledger.count("gaussian_query") == 1
    with pytest.raises(sem.SemanticsError):
        sem.release_distribution(raw, 5.0, NoiseSource(0), ledger)
    with pytest.raises(sem.SemanticsError):
        sem.release_distribution(noisy, 5.0, NoiseSource(0), ledger)
    assert ledger.count() == 1


def test_selection_refuses_raw_counts():
    _, _, horses, Q = zebra_bee_world()
    raw = sem.build_distribution(Q, horses, 1, 2)
    with pytest.raises(sem.SemanticsError):
        sem.select_description(raw, 1)
    assert sem.select_description(raw, 1, test_mode=True).selected == frozenset({0})


def test_empty_selection_warns():
    vocab, public, _, _ = zebra_bee_world()
    with pytest.warns(sem.EmptySelectionWarning):
        out = sem.select_pretraining_data(public.subset(np.array([3, 4])), sem.SemanticDescription(frozenset({0})))
    assert len(out) == 0


def test_conditional_release_and_relabel():
    world = make_toy_world(0, ToyWorldSpec(n_semantics=4, public_n=200, sensitive_n=100, overlap=(2, 0)))
    tr = world.sensitive_train

    def oracle(X):  # nearest public mean
        d = ((np.atleast_2d(X)[:, None, :] - world.public_means[None]) ** 2).sum(-1)
        return -d

    oracle.n_semantics = 4
    raw = sem.conditional_distributions(oracle, tr, 1)
    assert sorted(raw) == [0, 1]
    np.testing.assert_array_equal(raw[0].counts + raw[1].counts, sem.build_distribution(oracle, tr, 1).counts)
    ledger = BudgetLedger()
    noisy = sem.release_conditional(raw, 2.0, NoiseSource(1), ledger)
    assert ledger.count() == 1
    desc = sem.select_conditional(noisy, 1)
    assert desc.per_category == {0: frozenset({2}), 1: frozenset({0})}
    chosen = sem.select_pretraining_data(world.public, desc)
    np.testing.assert_array_equal(chosen.labels, np.where(chosen.semantic_labels == 2, 0, 1))
    with pytest.raises(sem.SemanticsError):
        sem.conditional_distributions(oracle, tr, 1, partition={0: [0, 1], 1: [1, 2]})


def test_train_sqf_learns_public_semantics():
    world = make_toy_world(1, ToyWorldSpec(n_semantics=5, public_n=500))
    vocab = sem.SemanticVocabulary(world.vocab_names)
    Q = sem.train_sqf(world.public, vocab, sem.SqfConfig(hidden=16, epochs=60))
    assert all(b <= a + 1e-12 for a, b in zip(Q.loss_history, Q.loss_history[1:]))
    pred = sem.query_topk(Q, world.public.features, 1)[:, 0]
    assert np.mean(pred == world.public.semantic_labels) > 0.95
    # horses that look like zebras are read as zebras
    tr = world.sensitive_train
    assert np.mean(sem.query_topk(Q, tr.features, 1)[:, 0] == tr.semantic_labels) > 0.9


def test_sqf_requires_semantic_labels():
    with pytest.raises(sem.SemanticsError):
        sem.train_sqf(LabeledDataset(np.zeros((3, 2))), sem.SemanticVocabulary(("a",)))


def test_sd_table_and_sqf_roundtrip(tmp_path):
    world = make_toy_world(2, ToyWorldSpec(n_semantics=3, public_n=60))
    vocab = sem.SemanticVocabulary(world.vocab_names)
    sd = sem.SemanticDistribution(np.array([1.5, -0.25, 7.0]), 1, noisy=True)
    sem.write_sd_table(tmp_path / "sd.csv", sd, vocab)
    back, v2 = sem.read_sd_table(tmp_path / "sd.csv", 1)
    np.testing.assert_array_equal(back.counts, sd.counts)
    assert v2.names == vocab.names and back.noisy
    Q = sem.train_sqf(world.public, vocab, sem.SqfConfig(hidden=4, epochs=3))
    sem.save_sqf(tmp_path / "q.ckpt", Q)
    Q2 = sem.load_sqf(tmp_path / "q.ckpt")
    np.testing.assert_array_equal(Q2.probabilities(world.public.features), Q.probabilities(world.public.features))


def test_vocabulary_checks():
    with pytest.raises(sem.SemanticsError):
        sem.SemanticVocabulary(("a", "a"))
    assert sem.SemanticVocabulary(("a", "b")).index["b"] == 1
