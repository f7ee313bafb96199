from __future__ import annotations

from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from lemmaflow.domain import (
    BudgetConfig,
    DanglingCitation,
    DomainError,
    IndexClash,
    Lemma,
    LemmaLibrary,
    MetaAction,
    Problem,
    ProblemKind,
    Round,
    Trajectory,
    extract_citations,
    library_insert,
    normalize_statement,
    statement_identity,
)


def lem(i, cites=(), fixed=False, statement=None):
    steps = tuple(f"By Lemma {c}, done." for c in cites) or ("Direct.",)
    return Lemma(i, statement or f"Claim {i}.", steps, fixed_suffix=fixed)


def test_citations_come_from_proof_steps():
    assert extract_citations(["By Lemma 3 and Lemma 12.", "Using Lemma 3-fixed."]) == {3, 12}
    assert extract_citations(["Lemma 4 gives it"], own_index=4) == frozenset()


def test_insert_requires_increasing_indices_and_known_citations():
    lib = library_insert(LemmaLibrary(), lem(1))
    lib = library_insert(lib, lem(3, cites=[1]))
    assert [e.index for e in lib] == [1, 3] and lib.next_index == 4
    with pytest.raises(IndexClash):
        library_insert(lib, lem(2))
    with pytest.raises(IndexClash):
        library_insert(lib, lem(3))
    with pytest.raises(DanglingCitation):
        library_insert(lib, lem(5, cites=[2]))


def test_fixed_lemma_corrects_an_existing_one_once():
    lib = library_insert(LemmaLibrary(), lem(1))
    lib = library_insert(lib, lem(1, fixed=True))
    assert lib.get("1-fixed") is not None
    with pytest.raises(IndexClash):
        library_insert(lib, lem(1, fixed=True))
    with pytest.raises(IndexClash):
        library_insert(lib, lem(7, fixed=True))


def test_sentinel_never_stored():
    with pytest.raises(DomainError):
        library_insert(LemmaLibrary(), Lemma(-1, "nothing", proven=False))


@given(st.lists(st.integers(1, 4), min_size=1, max_size=12))
def test_library_order_is_topological(gaps):
    lib, index = LemmaLibrary(), 0
    for g in gaps:
        index += g
        earlier = [e.index for e in lib]
        lib = library_insert(lib, lem(index, cites=earlier[-2:]))
    position = {e.index: i for i, e in enumerate(lib)}
    for e in lib:
        assert all(position[c] < position[e.index] for c in e.cited_indices)


def test_lemma_invariants():
    with pytest.raises(DomainError):
        Lemma(0, "x")
    with pytest.raises(DomainError):
        Lemma(1, "x", proven=True)
    with pytest.raises(DomainError):
        Lemma(1, "x", ("s",), confidence=Fraction(5, 4))
    assert lem(2).with_confidence(3, 4).confidence == Fraction(3, 4)
    assert lem(2, fixed=True).key == "2-fixed"


def test_statement_identity_ignores_spacing_only():
    assert normalize_statement("  A   triangle\nis  isosceles. ") == "A triangle is isosceles."
    assert statement_identity("a  b") == statement_identity("a b")
    # case is meaningful in mathematics ($A$ versus $a$)
    assert statement_identity("A b") != statement_identity("a b")


def test_round_progress_flag_follows_lemmas():
    assert Round(1, "extract_lemmas", "", "", new_lemmas=(lem(1),)).progress_flag is True
    assert Round(2, MetaAction.COMMIT_ANSWER, "", "").progress_flag is False
    with pytest.raises(DomainError):
        Round(1, "extract_lemmas", "", "", progress_flag=True)
    with pytest.raises(DomainError):
        Round(0, "extract_lemmas", "", "")


def test_trajectory_invariants():
    with pytest.raises(DomainError):
        Trajectory("p", "r", outcome_correct=False, final_reward=1.0)
    Trajectory("p", "r", outcome_correct=False, final_reward=1.0, outcome_gate=False)
    with pytest.raises(DomainError):
        Trajectory("p", "r", pv_passes=5, pv_trials=4)
    rounds = tuple(Round(t, "extract_lemmas", "", "") for t in range(1, 4))
    with pytest.raises(DomainError):
        Trajectory("p", "r", rounds, max_rounds=2)


def test_solved_prefers_outcome_then_unanimous_vote():
    assert Trajectory("p", "r", outcome_correct=True).solved
    assert not Trajectory("p", "r", pv_passes=4, pv_trials=4, outcome_correct=False).solved
    assert Trajectory("p", "r", pv_passes=4, pv_trials=4).solved
    assert not Trajectory("p", "r", pv_passes=3, pv_trials=4).solved


@pytest.mark.parametrize("field", ["max_rounds", "verifier_samples", "max_refinement_rounds", "parallel_rollouts"])
def test_budget_rejects_nonpositive(field):
    with pytest.raises(DomainError):
        BudgetConfig(**{field: 0})


def test_budget_threshold_is_strict():
    b = BudgetConfig()
    assert not b.admits(Fraction(1, 2)) and b.admits(Fraction(3, 4))


def test_problem_kind():
    p = Problem("x", "Find x.", ProblemKind.SOLUTION_BASED, "4")
    assert p.kind is ProblemKind.SOLUTION_BASED
