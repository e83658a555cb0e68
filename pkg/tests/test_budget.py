import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lowbudget.budget import (
    BudgetSelection,
    reference_uniform_oracle,
    select,
    select_minrank,
    select_random,
    select_toprank,
    select_uniform,
    uniform_bins,
)
from lowbudget.errors import ContractViolation, DataError
from lowbudget.scoring import ScoreTable


def table(mapping):
    return ScoreTable(list(mapping), list(mapping.values()), "entropy")


def test_hand_trace_five_scores():
    t = table({1: 0.0, 2: 0.25, 3: 0.5, 4: 0.75, 5: 1.0})
    assert uniform_bins(t.scores, 2).tolist() == [1, 1, 2, 2, 2]
    sel = select_uniform(t, 2)
    assert sel.selected_ids == (5, 2)
    assert sel.scores == (1.0, 0.25)


def test_hand_trace_ten_scores():
    t = table({i + 1: i / 10 for i in range(10)})
    assert uniform_bins(t.scores, 3).tolist() == [1, 1, 1, 2, 2, 2, 3, 3, 3, 3]
    assert select_uniform(t, 3).selected_ids == (10, 6, 3)


def test_equal_scores_and_single_pick():
    assert select_uniform(table({i: 0.4 for i in range(1, 6)}), 3).selected_ids == (1, 2, 3)
    t = table({1: 0.2, 2: 0.9, 3: 0.5, 4: 0.1})
    assert select_uniform(t, 1).selected_ids == (2,)


def test_literal_bins_leave_the_maximum_out():
    t = table({1: 0.0, 2: 0.25, 3: 0.5, 4: 0.75, 5: 1.0})
    assert uniform_bins(t.scores, 2, literal_bins=True).tolist() == [1, 1, 2, 2, 3]
    assert select_uniform(t, 2, literal_bins=True).selected_ids == (4, 2)
    assert reference_uniform_oracle(t, 2, literal_bins=True).selected_ids == (4, 2)
    with pytest.raises(DataError):
        select_uniform(t, 5, literal_bins=True)


def test_uniform_takes_everything_when_k_equals_m():
    t = table({3: 0.3, 1: 0.9, 2: 0.6})
    assert sorted(select_uniform(t, 3).selected_ids) == [1, 2, 3]


def test_toprank_and_minrank():
    t = table({1: 0.1, 2: 0.9, 3: 0.5})
    assert select_toprank(t, 2).selected_ids == (2, 3)
    assert select_toprank(t, 3).selected_ids == (2, 3, 1)
    assert select_toprank(table({1: 0.5, 2: 0.5, 3: 0.1}), 1).selected_ids == (1,)
    assert select_minrank(t, 2).selected_ids == (1, 3)
    assert select_minrank(t, 3).selected_ids == (1, 3, 2)
    assert select_minrank(table({1: 0.7, 2: 0.7, 3: 0.7}), 2).selected_ids == (1, 2)


def test_random_selection():
    ids = np.arange(20, 40)
    assert sorted(select_random(ids, 20, seed=3).selected_ids) == ids.tolist()
    assert select_random(ids, 5, seed=3).selected_ids == select_random(ids, 5, seed=3).selected_ids


def test_random_is_uniform_over_ids():
    ids = np.arange(10)
    counts = np.zeros(10)
    for seed in range(100_000):
        counts[select_random(ids, 1, seed).selected_ids[0]] += 1
    assert np.all(np.abs(counts / counts.sum() - 0.1) < 0.01)


@pytest.mark.parametrize("fn", [select_uniform, select_toprank, select_minrank])
def test_invalid_budget(fn):
    t = table({1: 0.1, 2: 0.2})
    for k in (0, 3, -1):
        with pytest.raises(ContractViolation):
            fn(t, k)


def test_unknown_strategy():
    with pytest.raises(ContractViolation):
        select(table({1: 0.1}), "bottom", 1)


def test_selection_validates_itself():
    with pytest.raises(ContractViolation):
        BudgetSelection((1, 1), "uniform", "entropy", 2)
    with pytest.raises(ContractViolation):
        BudgetSelection((1, 2), "uniform", "entropy", 3)


def test_selection_round_trip(tmp_path):
    t = table({i: (i * 37 % 11) / 11 for i in range(1, 31)})
    sel = select(t, "random", 7, seed=5)
    sel.save(tmp_path / "sel.csv")
    back = BudgetSelection.load(tmp_path / "sel.csv")
    assert back == sel
    assert back.table_hash == t.digest()


scores_st = st.lists(
    st.one_of(st.sampled_from([0.0, 0.25, 0.5, 1.0]), st.floats(0.0, 3.0, allow_nan=False)),
    min_size=1,
    max_size=60,
)


@settings(max_examples=300, deadline=None)
@given(scores_st, st.data())
def test_uniform_matches_reference(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    ids = data.draw(st.permutations(list(range(100, 100 + len(scores)))))
    t = ScoreTable(ids, scores, "entropy")
    fast = select_uniform(t, k)
    ref = reference_uniform_oracle(t, k)
    assert fast.selected_ids == ref.selected_ids
    assert len(set(fast.selected_ids)) == k


@settings(max_examples=200, deadline=None)
@given(scores_st, st.data())
def test_uniform_covers_every_nonempty_bin_first(scores, data):
    k = data.draw(st.integers(1, len(scores)))
    t = ScoreTable(list(range(len(scores))), scores, "entropy")
    bins = uniform_bins(t.scores, k)
    occupied = len(set(bins.tolist()))
    head = select_uniform(t, k).selected_ids[:occupied]
    assert len({int(bins[i]) for i in head}) == occupied
