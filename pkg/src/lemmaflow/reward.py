"""Conjugate reward for noisy process verification.

A solution that passes ``k`` of ``n`` verifier checks has latent quality
``p1 ~ Beta(k+1, n-k+1)`` under a uniform prior. Its reward measures how
likely it is to beat a solution that failed every check,
``p0 ~ Beta(1, n+1)``::

    P(p1 > p0) = E[F0(p1)] = 1 - E[(1 - p1)^(n+1)]
               = 1 - B(k+1, 2n-k+2) / B(k+1, n-k+1)

For integer counts the Beta-function ratio collapses to factorials,

    B(k+1, 2n-k+2) / B(k+1, n-k+1) = (2n-k+1)! (n+1)! / ((2n+2)! (n-k)!)

which we evaluate exactly with rationals. The default reward is the
log-odds of that probability, which is 0 at ``k=0`` and ``ln 251`` at
``k=n=4``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from math import factorial

from .domain import DomainError, Trajectory


class TrialMismatch(DomainError):
    pass


class RewardTransform(str, Enum):
    PROBABILITY = "probability"
    LOG_ODDS = "log_odds"


@dataclass(frozen=True)
class BetaPosterior:
    alpha: float
    beta: float

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise DomainError(f"Beta {name} must be finite and positive, got {v}")

    @classmethod
    def from_counts(cls, k: int, n: int) -> "BetaPosterior":
        _check_counts(k, n)
        return cls(k + 1, n - k + 1)

    @property
    def mean(self) -> float:
        return self.alpha / (self.alpha + self.beta)

    def log_beta(self) -> float:
        return math.lgamma(self.alpha) + math.lgamma(self.beta) - math.lgamma(self.alpha + self.beta)

    def pdf(self, x: float) -> float:
        if not 0.0 < x < 1.0:
            if x == 0.0 and self.alpha == 1.0:
                return math.exp(-self.log_beta())
            if x == 1.0 and self.beta == 1.0:
                return math.exp(-self.log_beta())
            return 0.0
        return math.exp(
            (self.alpha - 1) * math.log(x) + (self.beta - 1) * math.log1p(-x) - self.log_beta()
        )


@dataclass(frozen=True)
class RewardSpec:
    n: int = 4
    transform: RewardTransform = RewardTransform.LOG_ODDS
    outcome_gate: bool = True

    def __post_init__(self):
        if self.n < 1:
            raise DomainError("reward n must be >= 1")
        object.__setattr__(self, "transform", RewardTransform(self.transform))


def _check_counts(k: int, n: int):
    if n < 1 or not 0 <= k <= n:
        raise DomainError(f"need 0 <= k <= n and n >= 1, got k={k}, n={n}")


def dominance_fraction(k: int, n: int) -> Fraction:
    """Exact P(p1 > p0) as a rational number."""
    _check_counts(k, n)
    ratio = Fraction(
        factorial(2 * n - k + 1) * factorial(n + 1),
        factorial(2 * n + 2) * factorial(n - k),
    )
    return 1 - ratio


def dominance_probability(k: int, n: int) -> float:
    return float(dominance_fraction(k, n))


def conjugate_reward(k: int, spec: RewardSpec = RewardSpec()) -> float:
    p = dominance_fraction(k, spec.n)
    if spec.transform is RewardTransform.PROBABILITY:
        return float(p)
    odds = p / (1 - p)
    return math.log(odds.numerator) - math.log(odds.denominator)


def final_reward(traj: Trajectory, spec: RewardSpec = RewardSpec()) -> float:
    if traj.pv_trials != spec.n:
        raise TrialMismatch(f"trajectory has {traj.pv_trials} PV trials, reward spec expects {spec.n}")
    if spec.outcome_gate and traj.outcome_correct is False:
        return 0.0
    return conjugate_reward(traj.pv_passes, spec)


def aggregate_pv_votes(verdicts) -> tuple:
    """``(k, n)``: how many verdicts found no error, out of how many."""
    verdicts = list(verdicts)
    if not verdicts:
        raise DomainError("cannot aggregate an empty list of verdicts")
    return sum(1 for v in verdicts if v.passed), len(verdicts)
