from __future__ import annotations

import math
from fractions import Fraction

import pytest

from helpers import (
    EASY_SEARCH,
    FAIL_STEP,
    LATTICE_ADMITTED,
    LATTICE_VOTES,
    PASS,
    STUCK_SEARCH,
    FlakyProvider,
    cycling_entries,
    lattice_problem,
    lattice_provider,
)
from lemmaflow import Agent, BudgetConfig, MetaAction, Problem, ProblemKind, RewardSpec
from lemmaflow.domain import DomainError
from lemmaflow.orchestrator import Phase, RolloutAborted, derive_seed, rollout_id_for
from lemmaflow.provider import ProviderError, ScriptedProvider
from lemmaflow.store import TrajectoryRecord, dumps

EASY = Problem("easy", "What is 2+2?", ProblemKind.SOLUTION_BASED, "4")
PROOF = Problem("proof", "Prove that 2+2=4.")


def agent(entries_or_provider, **budget):
    provider = (
        entries_or_provider
        if not isinstance(entries_or_provider, list)
        else ScriptedProvider(entries_or_provider)
    )
    return Agent(provider, BudgetConfig(**budget), RewardSpec(n=4), seed=3)


@pytest.fixture(scope="module")
def lattice():
    events = []
    a = Agent(lattice_provider(), BudgetConfig(), RewardSpec(n=4), seed=1, on_event=events.append)
    return a.solve(lattice_problem()), events


def test_lattice_confidences(lattice):
    traj, _ = lattice
    got = {l.key: l.confidence for r in traj.rounds for l in r.new_lemmas}
    assert got == {k: Fraction(v, 4) for k, v in LATTICE_VOTES.items()}


def test_lattice_library_admits_only_majority_lemmas(lattice):
    traj, _ = lattice
    admitted = [k for r in traj.rounds for k in r.admitted]
    assert admitted == LATTICE_ADMITTED
    assert "5" not in admitted  # exactly one half is not a majority


def test_lattice_rounds_and_refinement(lattice):
    traj, _ = lattice
    assert len(traj.rounds) == 4
    assert [r.progress_flag for r in traj.rounds] == [True, False, True, True]
    assert traj.rounds[3].search_verdict == "complete"
    assert all(r.meta_action is MetaAction.EXTRACT_LEMMAS for r in traj.rounds)
    assert len(traj.refinement_log) == 1 and traj.refinement_log[0].passes == 3
    assert (traj.pv_passes, traj.pv_trials) == (4, 4)
    assert traj.outcome_correct is True
    assert traj.final_reward == pytest.approx(math.log(251))


def test_lattice_origins_record_rollout_and_round(lattice):
    traj, _ = lattice
    for r in traj.rounds:
        for l in r.new_lemmas:
            assert l.origin.rollout_id == traj.rollout_id and l.origin.round_index == r.t


def test_events_cover_every_call(lattice):
    _, events = lattice
    roles = [e["role"] for e in events]
    assert roles.count("reasoner") == 4 and roles.count("summarizer") == 4
    assert roles.count("theorem_verifier") == len(LATTICE_VOTES)
    assert roles.count("process_verifier") == 2 and roles.count("improver") == 1
    assert all(e["samples"] == 4 for e in events if e["role"] == "theorem_verifier")


def test_derive_seed_is_stable_and_separates_parts():
    assert derive_seed(1, "a", 2) == derive_seed(1, "a", "2")
    assert derive_seed(1, "a") != derive_seed(2, "a") != derive_seed(1, "b")
    assert 0 <= derive_seed(5, "x") < 2**63
    assert rollout_id_for(EASY, 7) == "easy-r0007"


def test_phase_machine():
    a = agent([])
    s = a.new_state(EASY)
    with pytest.raises(DomainError):
        s.advance(Phase.DONE)
    s = s.advance(Phase.REFINING)
    with pytest.raises(DomainError):
        s.advance(Phase.EXPLORING)
    with pytest.raises(DomainError):
        a.run_round(s)


def test_direct_answer_commits():
    traj = agent(cycling_entries(EASY_SEARCH)).solve(EASY)
    assert len(traj.rounds) == 1
    assert traj.rounds[0].meta_action is MetaAction.COMMIT_ANSWER
    assert traj.outcome_correct and traj.pv_passes == 4


def test_round_budget_is_enforced():
    traj = agent(cycling_entries(STUCK_SEARCH + "more thoughts"), max_rounds=3).solve(PROOF)
    assert len(traj.rounds) == 3 and traj.max_rounds == 3
    assert traj.final_solution.startswith(STUCK_SEARCH)


def test_empty_reasoner_output_scores_zero_without_votes():
    provider = ScriptedProvider(cycling_entries(""))
    traj = agent(provider, max_rounds=2).solve(EASY)
    assert (traj.pv_passes, traj.pv_trials) == (0, 4)
    assert traj.final_reward == 0.0 and traj.outcome_correct is False


def test_refinement_exhausts_its_budget():
    entries = cycling_entries(EASY_SEARCH, pv=FAIL_STEP)
    a = agent(entries, max_refinement_rounds=3)
    events = []
    a.on_event = events.append
    traj = a.solve(EASY)
    assert traj.refinement_exhausted and traj.pv_passes == 0
    assert sum(e["role"] == "process_verifier" for e in events) == 3
    assert len(traj.refinement_log) == 2


def test_improver_giving_up_keeps_last_vote():
    entries = cycling_entries(EASY_SEARCH, pv=FAIL_STEP)
    entries[-1] = {"role": "improver", "responses": ["I have not found a complete solution."], "cycle": True}
    traj = agent(entries).solve(EASY)
    assert traj.improver_gave_up and traj.pv_passes == 0 and traj.pv_trials == 4
    assert traj.final_solution == EASY_SEARCH


def test_proof_problem_has_no_outcome():
    traj = agent(cycling_entries(EASY_SEARCH)).solve(PROOF)
    assert traj.outcome_correct is None and traj.solved


def test_wrong_answer_is_gated():
    wrong = EASY_SEARCH.replace("{4}", "{5}")
    traj = agent(cycling_entries(wrong)).solve(EASY)
    assert traj.outcome_correct is False and traj.final_reward == 0.0 and traj.pv_passes == 4


def test_only_fixed_candidates_invoke_verification():
    lemma1 = "<lemma>\n**Lemma 1:** $2+2=4$.\n**Proof 1:**\n* **Step 1:** Count.\n</lemma>"
    fixed = lemma1.replace("Lemma 1:", "Lemma 1-fixed:").replace("Proof 1:", "Proof 1-fixed:")
    entries = [
        {"role": "reasoner", "responses": [STUCK_SEARCH + "a", STUCK_SEARCH + "b", EASY_SEARCH]},
        {"role": "summarizer", "responses": [lemma1, fixed, "Can not summary any new lemmas."]},
        {"role": "theorem_verifier", "responses": [PASS], "cycle": True},
        {"role": "process_verifier", "responses": [PASS], "cycle": True},
    ]
    traj = agent(entries).solve(EASY)
    assert [r.meta_action for r in traj.rounds] == [
        MetaAction.EXTRACT_LEMMAS, MetaAction.INVOKE_VERIFICATION, MetaAction.COMMIT_ANSWER,
    ]
    assert traj.rounds[1].admitted == ("1-fixed",)


def test_wellformed_bonus_only_for_clean_rounds():
    lemma1 = "<lemma>\n**Lemma 1:** $2+2=4$.\n**Proof 1:**\n* **Step 1:** Count.\n</lemma>"
    entries = cycling_entries(EASY_SEARCH, summary=lemma1)
    a = Agent(ScriptedProvider(entries), BudgetConfig(), RewardSpec(n=4), wellformed_bonus=0.25)
    assert a.solve(EASY).rounds[0].step_reward == 0.25
    entries = cycling_entries(EASY_SEARCH, summary=lemma1.replace("Lemma 1:", "Lemma 3:"))
    a = Agent(ScriptedProvider(entries), BudgetConfig(), RewardSpec(n=4), wellformed_bonus=0.25)
    assert a.solve(EASY).rounds[0].step_reward == 0.0  # renumbered, so not clean


def test_provider_failure_aborts_with_partial():
    entries = cycling_entries(STUCK_SEARCH)
    entries = [e for e in entries if e["role"] != "summarizer"]
    with pytest.raises(RolloutAborted) as info:
        agent(entries).solve(PROOF)
    assert info.value.partial.aborted and info.value.partial.rounds == ()


def test_iter_solve_yields_partials_for_aborted_rollouts():
    provider = FlakyProvider(ScriptedProvider(cycling_entries(EASY_SEARCH)), failures=1, error=ProviderError)
    trajs = agent(provider).solve_many(EASY, 2)
    assert trajs[0].aborted and trajs[1].aborted is None


def test_parallel_rollouts_match_sequential():
    def run(parallel):
        a = agent(cycling_entries(EASY_SEARCH), parallel_rollouts=parallel)
        return [dumps(TrajectoryRecord(t)) for t in a.solve_many(EASY, 6)]

    seq, par = run(1), run(4)
    assert seq == par
    assert [f'"rollout_id":"easy-r000{i}"' in s for i, s in enumerate(seq)] == [True] * 6
