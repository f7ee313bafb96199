"""Lemma-memory math agent orchestration with lemma-graph credit assignment."""

from __future__ import annotations

__version__ = "0.1.0"

from .domain import (  # noqa: E402
    BudgetConfig,
    Lemma,
    LemmaLibrary,
    MetaAction,
    Problem,
    ProblemKind,
    Round,
    Trajectory,
    library_insert,
)
from .orchestrator import Agent  # noqa: E402
from .reward import RewardSpec, conjugate_reward, dominance_probability  # noqa: E402

__all__ = [
    "Agent",
    "BudgetConfig",
    "Lemma",
    "LemmaLibrary",
    "MetaAction",
    "Problem",
    "ProblemKind",
    "RewardSpec",
    "Round",
    "Trajectory",
    "conjugate_reward",
    "dominance_probability",
    "library_insert",
]
