from __future__ import annotations

import math
from fractions import Fraction

import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import dominance_dblquad
from lemmaflow.domain import DomainError, Trajectory
from lemmaflow.protocol import VerifierVerdict
from lemmaflow.reward import (
    BetaPosterior,
    RewardSpec,
    RewardTransform,
    TrialMismatch,
    aggregate_pv_votes,
    conjugate_reward,
    dominance_fraction,
    dominance_probability,
    final_reward,
)

counts = st.integers(1, 40).flatmap(lambda n: st.tuples(st.integers(0, n), st.just(n)))


@pytest.mark.parametrize(
    "k, n, expected",
    [
        (0, 4, Fraction(1, 2)),
        (4, 4, Fraction(251, 252)),
        (0, 1, Fraction(1, 2)),
        (1, 1, Fraction(5, 6)),
    ],
)
def test_dominance_fraction_values(k, n, expected):
    assert dominance_fraction(k, n) == expected


@pytest.mark.parametrize("k, n", [(0, 1), (1, 2), (2, 4), (3, 4), (5, 7)])
def test_dominance_matches_adaptive_quadrature(k, n):
    assert dominance_probability(k, n) == pytest.approx(dominance_dblquad(k, n), abs=1e-10)


def test_all_fail_gives_zero_reward_for_every_n():
    for n in range(1, 30):
        assert conjugate_reward(0, RewardSpec(n=n)) == 0.0


def test_unanimous_reward_is_log_251_at_four():
    assert conjugate_reward(4, RewardSpec(n=4)) == pytest.approx(math.log(251), abs=1e-12)


@given(counts)
def test_reward_strictly_increasing_in_passes(kn):
    k, n = kn
    if k < n:
        assert conjugate_reward(k + 1, RewardSpec(n=n)) > conjugate_reward(k, RewardSpec(n=n))


@given(counts)
def test_probability_transform_is_the_dominance_probability(kn):
    k, n = kn
    spec = RewardSpec(n=n, transform=RewardTransform.PROBABILITY)
    assert conjugate_reward(k, spec) == dominance_probability(k, n)
    assert 0.5 <= conjugate_reward(k, spec) <= 1
    assert dominance_fraction(k, n) < 1


@given(st.integers(1, 200))
def test_log_odds_stays_finite_for_large_n(n):
    r = conjugate_reward(n, RewardSpec(n=n))
    assert math.isfinite(r) and r > 0


@pytest.mark.parametrize("k, n", [(-1, 4), (5, 4), (0, 0)])
def test_bad_counts_raise(k, n):
    with pytest.raises(DomainError):
        dominance_fraction(k, n)


def test_beta_posterior_density_integrates_to_one():
    post = BetaPosterior.from_counts(3, 4)
    xs = [(i + 0.5) / 20000 for i in range(20000)]
    assert sum(post.pdf(x) for x in xs) / 20000 == pytest.approx(1.0, abs=1e-6)
    assert post.mean == pytest.approx(4 / 6)


def _traj(passes, trials, correct):
    return Trajectory("p", "p-r0000", pv_passes=passes, pv_trials=trials, outcome_correct=correct)


def test_outcome_gate_zeroes_wrong_answers():
    assert final_reward(_traj(4, 4, False), RewardSpec(n=4)) == 0.0
    assert final_reward(_traj(4, 4, True), RewardSpec(n=4)) == pytest.approx(math.log(251))
    assert final_reward(_traj(4, 4, None), RewardSpec(n=4)) == pytest.approx(math.log(251))


def test_gate_can_be_switched_off():
    spec = RewardSpec(n=4, outcome_gate=False)
    assert final_reward(_traj(3, 4, False), spec) == conjugate_reward(3, spec)


def test_trial_count_must_match_spec():
    with pytest.raises(TrialMismatch):
        final_reward(_traj(2, 3, None), RewardSpec(n=4))


def test_aggregate_votes():
    verdicts = [VerifierVerdict.all_correct(), VerifierVerdict.step_error(2), VerifierVerdict.all_correct()]
    assert aggregate_pv_votes(verdicts) == (2, 3)
    with pytest.raises(DomainError):
        aggregate_pv_votes([])
